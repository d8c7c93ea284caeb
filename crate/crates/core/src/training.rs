//! v-prediction loss, Adam, and the two-stage training step.
//!
//! Stage 1 denoises the first `P+K` frames of each clip with conditions drawn
//! from the window itself (or `U`) and the global context of `U`. Its `x̂_0`
//! reconstruction then feeds stage 2: the last `P` reconstructed frames become
//! the local conditions and the whole reconstruction the global context for
//! the window `[K, 2K+P)`. The reconstruction is a plain array, so no gradient
//! crosses from stage 2 into stage 1.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{
    build_condition, sample_stage_one_positions, select_stage_windows, ConditioningError,
    FixedContext, GlobalSource, StageWindows,
};
use crate::diffusion::{gaussian, q_sample, v_from_x0_eps, x0_from_v, DiffusionError, NoiseSchedule};
use crate::model::{LgcModel, ModelConfig, ModelError};
use crate::numerics::{Array, Gradients, Graph, NumericsError, Real};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("clip {index} has shape {got:?}, expected [>= {min_len}, {frame:?}]")]
    ClipShape {
        index: usize,
        got: Vec<usize>,
        min_len: usize,
        frame: Vec<usize>,
    },
    #[error("non-finite loss in stage {stage}")]
    NonFiniteLoss { stage: u8 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// `T`: diffusion steps.
    pub diffusion_steps: usize,
    /// `L`: clip length used per step.
    pub clip_len: usize,
    /// `K`: frames predicted per stage.
    pub pred_frames: usize,
    /// `P`: condition frames.
    pub cond_frames: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Run the second stage on the model's own reconstruction.
    pub stage_two: bool,
    /// Keep the cross-attention value paths trainable.
    pub global_context: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            diffusion_steps: 1000,
            clip_len: 14,
            pred_frames: 6,
            cond_frames: 2,
            learning_rate: 1e-4,
            batch_size: 8,
            max_steps: 2000,
            seed: 0,
            stage_two: true,
            global_context: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainingError> {
        let fail = |m: String| Err(TrainingError::Config(m));
        if self.diffusion_steps == 0 || self.batch_size == 0 || self.pred_frames == 0 {
            return fail("T, batch size and K must be positive".into());
        }
        if self.cond_frames == 0 {
            return fail("P must be positive".into());
        }
        if self.clip_len < 2 * self.pred_frames + self.cond_frames {
            return fail(format!(
                "L={} shorter than 2K+P={}",
                self.clip_len,
                2 * self.pred_frames + self.cond_frames
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if model.cond_frames != self.cond_frames || model.pred_frames != self.pred_frames {
            return fail(format!(
                "model window P={} K={} differs from training P={} K={}",
                model.cond_frames, model.pred_frames, self.cond_frames, self.pred_frames
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for every parameter, in registration order.
#[derive(Clone, Debug)]
pub struct AdamState<E: Real = f32> {
    pub first: Vec<Array<E>>,
    pub second: Vec<Array<E>>,
    /// Number of updates applied so far.
    pub updates: u64,
}

impl<E: Real> AdamState<E> {
    pub fn for_model(model: &LgcModel<E>) -> Self {
        let zeros: Vec<_> = model
            .params()
            .iter()
            .map(|(_, _, a)| Array::zeros(a.shape().to_vec()))
            .collect();
        Self {
            second: zeros.clone(),
            first: zeros,
            updates: 0,
        }
    }
}

/// Bias-corrected Adam step. Parameters without a gradient (frozen) are skipped.
pub fn adam_update<E: Real>(
    model: &mut LgcModel<E>,
    state: &mut AdamState<E>,
    grads: &Gradients<E>,
    cfg: &AdamConfig,
) {
    state.updates += 1;
    let step = state.updates as i32;
    let c1 = 1.0 - cfg.beta1.powi(step);
    let c2 = 1.0 - cfg.beta2.powi(step);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let Some(g) = grads.get(id.index()) else { continue };
        let m = state.first[id.index()].data_mut();
        let v = state.second[id.index()].data_mut();
        let p = model.params_mut().get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64();
            let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
            m[i] = E::of(mi);
            v[i] = E::of(vi);
            let delta = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p[i] = E::of(p[i].as_f64() - delta);
        }
    }
}

/// Global-context input for [`v_loss`].
#[derive(Clone, Copy, Debug)]
pub enum ContextInput<'a, E: Real> {
    /// One `[1, W·C, H, W]` fragment shared by the whole batch (e.g. `U`).
    Shared(&'a Array<E>),
    /// One fragment per batch entry, `[N, W·C, H, W]`.
    PerSample(&'a Array<E>),
}

/// Inputs of one loss evaluation, all batched on the leading axis.
#[derive(Clone, Debug)]
pub struct LossInputs<'a, E: Real> {
    pub x0: &'a Array<E>,
    pub y_m: &'a Array<E>,
    pub context: ContextInput<'a, E>,
    pub t: &'a [usize],
    pub eps: &'a Array<E>,
}

#[derive(Clone, Debug)]
pub struct VLoss<E: Real> {
    pub loss: f64,
    pub grads: Gradients<E>,
    pub x_t: Array<E>,
    pub v_hat: Array<E>,
}

/// Mean squared error between the model's `v̂` and the true `v`, with
/// gradients for every trainable parameter including the sequence encoder.
pub fn v_loss<E: Real>(
    model: &LgcModel<E>,
    inp: &LossInputs<E>,
    sched: &NoiseSchedule,
) -> Result<VLoss<E>, TrainingError> {
    let n = inp.x0.shape()[0];
    if inp.t.len() != n || inp.eps.shape() != inp.x0.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "v_loss",
            lhs: inp.x0.shape().to_vec(),
            rhs: inp.eps.shape().to_vec(),
        }
        .into());
    }
    let mut x_t = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, &t) in inp.t.iter().enumerate() {
        let x0 = inp.x0.slice_outer(i, i + 1)?;
        let eps = inp.eps.slice_outer(i, i + 1)?;
        x_t.push(q_sample(&x0, t, &eps, sched)?);
        v.push(v_from_x0_eps(&x0, &eps, t, sched)?);
    }
    let x_t = Array::stack_outer(&x_t)?;
    let v = Array::stack_outer(&v)?;

    let mut g = Graph::new();
    let z = match inp.context {
        ContextInput::Shared(c) => {
            let c = g.constant(c.clone());
            let z = model.encode(&mut g, c)?;
            if n == 1 {
                z
            } else {
                g.tile_batch(z, n)?
            }
        }
        ContextInput::PerSample(c) => {
            let c = g.constant(c.clone());
            model.encode(&mut g, c)?
        }
    };
    let xv = g.constant(x_t.clone());
    let yv = g.constant(inp.y_m.clone());
    let v_hat = model.forward(&mut g, xv, inp.t, yv, z)?;
    let target = g.constant(v);
    g.set_scope("loss");
    let loss = g.mse(v_hat, target)?;
    let value = g.value(loss).item().expect("scalar loss").as_f64();
    let v_hat = g.value(v_hat).clone();
    let grads = g.backward(loss)?;
    Ok(VLoss {
        loss: value,
        grads,
        x_t,
        v_hat,
    })
}

/// Result of one stage before its optimizer update.
#[derive(Clone, Debug)]
pub struct StageResult<E: Real> {
    pub loss: f64,
    pub grads: Gradients<E>,
    /// `[N, P·(C+1), H, W]` conditions the model saw.
    pub y_m: Array<E>,
    /// Detached `x̂_0` of the denoised window, clipped to `[−1, 1]`.
    pub x0_hat: Array<E>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss1: f64,
    pub loss2: Option<f64>,
    /// Optimizer updates applied by this step.
    pub updates: usize,
}

/// Model, optimizer moments, step counter and the sampling stream.
#[derive(Clone, Debug)]
pub struct TrainState<E: Real = f32> {
    pub model: LgcModel<E>,
    pub adam: AdamState<E>,
    pub config: TrainingConfig,
    pub step: usize,
    pub rng: ChaCha8Rng,
    schedule: NoiseSchedule,
    windows: StageWindows,
}

impl<E: Real> TrainState<E> {
    pub fn new(mut model: LgcModel<E>, config: TrainingConfig) -> Result<Self, TrainingError> {
        config.validate(model.config())?;
        if !config.global_context && !model.global_disabled() {
            model.disable_global_context();
        }
        let schedule = NoiseSchedule::cosine(config.diffusion_steps)?;
        let windows = select_stage_windows(config.clip_len, config.cond_frames, config.pred_frames)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::for_model(&model),
            model,
            config,
            step: 0,
            rng,
            schedule,
            windows,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn windows(&self) -> &StageWindows {
        &self.windows
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig::new(self.config.learning_rate)
    }

    pub fn apply(&mut self, grads: &Gradients<E>) {
        let cfg = self.adam_config();
        adam_update(&mut self.model, &mut self.adam, grads, &cfg);
    }

    fn check_clips(&self, clips: &[Array<E>]) -> Result<(), TrainingError> {
        if clips.is_empty() {
            return Err(TrainingError::EmptyDataset);
        }
        let frame = self.model.config().frame_shape().to_vec();
        let min_len = 2 * self.config.pred_frames + self.config.cond_frames;
        for (index, clip) in clips.iter().enumerate() {
            let s = clip.shape();
            if s.len() != 4 || s[0] < min_len || s[1..] != frame[..] {
                return Err(TrainingError::ClipShape {
                    index,
                    got: s.to_vec(),
                    min_len,
                    frame: frame.clone(),
                });
            }
        }
        Ok(())
    }

    fn draw_noise(&mut self, shape: &[usize]) -> (Vec<usize>, Array<E>) {
        let t = (0..shape[0])
            .map(|_| self.rng.random_range(1..=self.config.diffusion_steps))
            .collect();
        (t, gaussian(shape, &mut self.rng))
    }

    fn frame_shape(&self) -> [usize; 3] {
        self.model.config().frame_shape()
    }

    /// Stage 1 loss and gradients on a batch; does not update parameters.
    pub fn stage_one(&mut self, clips: &[Array<E>]) -> Result<StageResult<E>, TrainingError> {
        self.check_clips(clips)?;
        let cfg = self.model.config().clone();
        let window = cfg.window();
        let span = window - 1;
        let range = self.windows.stage_one.clone();
        let mut x0 = Vec::with_capacity(clips.len());
        let mut y_m = Vec::with_capacity(clips.len());
        let u = GlobalSource::Fixed(FixedContext::new(&cfg.fragment_shape()));
        for clip in clips {
            let frames = window_frames(clip, range.clone())?;
            let positions =
                sample_stage_one_positions(&mut self.rng, window, cfg.cond_frames, cfg.pred_frames);
            let chosen: Vec<Array<f32>> = positions
                .iter()
                .map(|p| frames[p.unwrap_or(0)].cast())
                .collect();
            let set = build_condition(&chosen, &positions, span, u.clone())?;
            y_m.push(batched(set.y_m.cast())?);
            x0.push(fold(&frames)?);
        }
        let x0 = Array::stack_outer(&x0)?;
        let y_m = Array::stack_outer(&y_m)?;
        let (t, eps) = self.draw_noise(x0.shape());
        let mut u_shape = vec![1];
        u_shape.extend_from_slice(&cfg.fragment_shape());
        let u = Array::zeros(u_shape);
        let inputs = LossInputs {
            x0: &x0,
            y_m: &y_m,
            context: ContextInput::Shared(&u),
            t: &t,
            eps: &eps,
        };
        let out = v_loss(&self.model, &inputs, &self.schedule)?;
        if !out.loss.is_finite() {
            return Err(TrainingError::NonFiniteLoss { stage: 1 });
        }
        let x0_hat = reconstruct(&out.x_t, &out.v_hat, &t, &self.schedule)?;
        Ok(StageResult {
            loss: out.loss,
            grads: out.grads,
            y_m,
            x0_hat,
        })
    }

    /// Stage 2 loss and gradients given stage 1's reconstruction.
    pub fn stage_two(
        &mut self,
        clips: &[Array<E>],
        x0_hat: &Array<E>,
    ) -> Result<StageResult<E>, TrainingError> {
        self.check_clips(clips)?;
        let cfg = self.model.config().clone();
        let span = cfg.window() - 1;
        let [c, h, w] = self.frame_shape();
        let frame_len = c * h * w;
        // reconstruction slots holding the stage-2 conditions
        let cond_slots = self.windows.stage_two_condition.start - self.windows.stage_one.start
            ..self.windows.stage_two_condition.end - self.windows.stage_one.start;
        let positions: Vec<Option<usize>> = (0..cfg.cond_frames).map(Some).collect();
        let mut x0 = Vec::with_capacity(clips.len());
        let mut y_m = Vec::with_capacity(clips.len());
        for (i, clip) in clips.iter().enumerate() {
            let frames = window_frames(clip, self.windows.stage_two_window())?;
            x0.push(fold(&frames)?);
            let rec = x0_hat.slice_outer(i, i + 1)?;
            let cond: Vec<Array<f32>> = cond_slots
                .clone()
                .map(|s| {
                    let data = rec.data()[s * frame_len..(s + 1) * frame_len].to_vec();
                    Array::from_vec([c, h, w], data).map(|a| a.cast())
                })
                .collect::<Result<_, _>>()?;
            let u = GlobalSource::Fixed(FixedContext::new(&cfg.fragment_shape()));
            let set = build_condition(&cond, &positions, span, u)?;
            y_m.push(batched(set.y_m.cast())?);
        }
        let x0 = Array::stack_outer(&x0)?;
        let y_m = Array::stack_outer(&y_m)?;
        let (t, eps) = self.draw_noise(x0.shape());
        let inputs = LossInputs {
            x0: &x0,
            y_m: &y_m,
            context: ContextInput::PerSample(x0_hat),
            t: &t,
            eps: &eps,
        };
        let out = v_loss(&self.model, &inputs, &self.schedule)?;
        if !out.loss.is_finite() {
            return Err(TrainingError::NonFiniteLoss { stage: 2 });
        }
        let x0_hat = reconstruct(&out.x_t, &out.v_hat, &t, &self.schedule)?;
        Ok(StageResult {
            loss: out.loss,
            grads: out.grads,
            y_m,
            x0_hat,
        })
    }

    /// One training step on a batch: stage 1 update, then (unless disabled)
    /// stage 2 update on the detached reconstruction.
    pub fn two_stage_step(&mut self, clips: &[Array<E>]) -> Result<StepReport, TrainingError> {
        let one = self.stage_one(clips)?;
        self.apply(&one.grads);
        let mut report = StepReport {
            step: self.step + 1,
            loss1: one.loss,
            loss2: None,
            updates: 1,
        };
        if self.config.stage_two {
            let two = self.stage_two(clips, &one.x0_hat)?;
            self.apply(&two.grads);
            report.loss2 = Some(two.loss);
            report.updates += 1;
        }
        self.step += 1;
        Ok(report)
    }

    /// Draws a batch of clip indices for the next step.
    pub fn draw_batch(&mut self, dataset_len: usize) -> Vec<usize> {
        let n = self.config.batch_size;
        if dataset_len >= n {
            index::sample(&mut self.rng, dataset_len, n).into_vec()
        } else {
            (0..n).map(|_| self.rng.random_range(0..dataset_len)).collect()
        }
    }
}

/// Runs `two_stage_step` until `max_steps`, calling `on_step` after each.
/// Resumes from `state.step`; zero remaining steps leaves the state untouched.
pub fn train<E: Real>(
    state: &mut TrainState<E>,
    dataset: &[Array<E>],
    mut on_step: impl FnMut(&StepReport, &TrainState<E>) -> Result<(), TrainingError>,
) -> Result<Vec<StepReport>, TrainingError> {
    if dataset.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    state.check_clips(dataset)?;
    let mut curve = Vec::new();
    while state.step < state.config.max_steps {
        let picks = state.draw_batch(dataset.len());
        let batch: Vec<Array<E>> = picks.iter().map(|&i| dataset[i].clone()).collect();
        let report = state.two_stage_step(&batch)?;
        on_step(&report, state)?;
        curve.push(report);
    }
    Ok(curve)
}

/// Exponential moving average of a loss curve, seeded with the first value.
pub fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// `[len, C, H, W]` clip → one `[C, H, W]` array per frame in `range`.
fn window_frames<E: Real>(
    clip: &Array<E>,
    range: std::ops::Range<usize>,
) -> Result<Vec<Array<E>>, NumericsError> {
    let frame_shape = clip.shape()[1..].to_vec();
    range
        .map(|i| clip.slice_outer(i, i + 1)?.reshape(frame_shape.clone()))
        .collect()
}

/// Frames → `[1, W·C, H, W]`.
fn fold<E: Real>(frames: &[Array<E>]) -> Result<Array<E>, NumericsError> {
    let s = frames[0].shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(frames.len() * c * h * w);
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Array::from_vec([1, frames.len() * c, h, w], data)
}

fn batched<E: Real>(a: Array<E>) -> Result<Array<E>, NumericsError> {
    let mut shape = vec![1];
    shape.extend_from_slice(a.shape());
    a.reshape(shape)
}

fn reconstruct<E: Real>(
    x_t: &Array<E>,
    v_hat: &Array<E>,
    t: &[usize],
    sched: &NoiseSchedule,
) -> Result<Array<E>, TrainingError> {
    let mut parts = Vec::with_capacity(t.len());
    for (i, &ti) in t.iter().enumerate() {
        let x = x_t.slice_outer(i, i + 1)?;
        let v = v_hat.slice_outer(i, i + 1)?;
        let one = E::one();
        parts.push(x0_from_v(&x, &v, ti, sched)?.map(|p| p.max(-one).min(one)));
    }
    Ok(Array::stack_outer(&parts)?)
}
