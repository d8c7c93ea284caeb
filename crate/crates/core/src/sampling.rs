//! Autoregressive video sampling: runs one conditional DDPM chain per
//! fragment of an [`AutoregressionPlan`], feeding earlier outputs forward as
//! local conditions and global context.

use thiserror::Error;

use crate::conditioning::{
    build_condition, AutoregressionPlan, ConditioningError, FixedContext, GlobalPlan, GlobalSource,
};
use crate::diffusion::{ddpm_sample, DiffusionError, NoiseSchedule};
use crate::model::{LgcModel, ModelError};
use crate::numerics::{Array, NumericsError};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("plan window of {plan} frames does not match the model window of {model}")]
    WindowMismatch { plan: usize, model: usize },
    #[error("expected {expected} given frames, got {got}")]
    GivenCount { expected: usize, got: usize },
    #[error("given frame has shape {got:?}, model expects {expected:?}")]
    FrameShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("frame {0} is needed as a condition before it is produced")]
    MissingFrame(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Seed of the chain for fragment `index` of a run seeded with `seed`.
pub fn fragment_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Produces the plan's `n` frames as `[n, C, H, W]`.
///
/// `given` holds one `[C, H, W]` frame per entry of `plan.given`, in order.
/// Given frames are copied to the output unchanged.
pub fn sample_video(
    model: &LgcModel<f32>,
    sched: &NoiseSchedule,
    plan: &AutoregressionPlan,
    given: &[Array<f32>],
    steps: usize,
    seed: u64,
) -> Result<Array<f32>, SamplingError> {
    let cfg = model.config();
    if plan.window_len() != cfg.window() {
        return Err(SamplingError::WindowMismatch {
            plan: plan.window_len(),
            model: cfg.window(),
        });
    }
    if given.len() != plan.given.len() {
        return Err(SamplingError::GivenCount {
            expected: plan.given.len(),
            got: given.len(),
        });
    }
    let frame_shape = cfg.frame_shape().to_vec();
    for f in given {
        if f.shape() != frame_shape.as_slice() {
            return Err(SamplingError::FrameShape {
                expected: frame_shape.clone(),
                got: f.shape().to_vec(),
            });
        }
    }
    let frame_len: usize = frame_shape.iter().product();
    let span = plan.mask_span();
    let total = plan
        .fragments
        .iter()
        .map(|f| f.window.end)
        .max()
        .unwrap_or(0)
        .max(plan.n);
    let mut video: Vec<Option<Array<f32>>> = vec![None; total];
    for (&i, f) in plan.given.iter().zip(given) {
        video[i] = Some(f.clone());
    }
    let u = Array::<f32>::zeros(cfg.fragment_shape());
    let mut outputs: Vec<Array<f32>> = Vec::with_capacity(plan.fragments.len());

    for (index, frag) in plan.fragments.iter().enumerate() {
        let mut frames = Vec::with_capacity(frag.condition_slots.len());
        for slot in &frag.condition_slots {
            frames.push(match slot {
                Some(s) => {
                    let abs = frag.window.start + s;
                    video[abs].clone().ok_or(SamplingError::MissingFrame(abs))?
                }
                None => Array::zeros(frame_shape.clone()),
            });
        }
        let global_tensor = match frag.global {
            GlobalPlan::Fixed => &u,
            GlobalPlan::Previous(i) => &outputs[i],
        };
        let z = model.global_context(global_tensor)?;
        let set = build_condition(
            &frames,
            &frag.condition_slots,
            span,
            GlobalSource::Fixed(FixedContext::new(&cfg.fragment_shape())),
        )?;
        let denoiser = model.denoiser(&set.y_m, &z);
        let mut window = ddpm_sample(
            &denoiser,
            &cfg.fragment_shape(),
            steps,
            sched,
            fragment_seed(seed, index),
        )?;
        // pin conditioning frames to their exact values
        for (slot, frame) in frag.condition_slots.iter().zip(&frames) {
            if let Some(s) = slot {
                window.data_mut()[s * frame_len..(s + 1) * frame_len].copy_from_slice(frame.data());
            }
        }
        for &abs in &frag.targets {
            let s = abs - frag.window.start;
            let data = window.data()[s * frame_len..(s + 1) * frame_len].to_vec();
            video[abs] = Some(Array::from_vec(frame_shape.clone(), data)?);
        }
        outputs.push(window);
    }

    let mut data = Vec::with_capacity(plan.n * frame_len);
    for (i, f) in video.iter().take(plan.n).enumerate() {
        data.extend_from_slice(f.as_ref().ok_or(SamplingError::MissingFrame(i))?.data());
    }
    let mut shape = vec![plan.n];
    shape.extend_from_slice(&frame_shape);
    Ok(Array::from_vec(shape, data)?)
}
