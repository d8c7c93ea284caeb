//! Local conditions (frames plus positional-mask planes), the fixed
//! unconditional tensor, and autoregressive fragment plans.
//!
//! The model always denoises a fixed-length *window* of frames. Conditioning
//! frames occupy some window slots; a slot `s` is marked with the constant
//! plane `(s+1)/(span+1)` where `span = window_len − 1`. Unconditional entries
//! use `j = −1`, i.e. a zero plane next to the all-zero tensor `U`.

use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::numerics::{Array, NumericsError};

#[derive(Debug, Error, PartialEq)]
pub enum ConditioningError {
    #[error("mask index {j} outside [-1, {k}]")]
    MaskOutOfRange { j: i64, k: usize },
    #[error("condition position {0} given more than once")]
    DuplicatePosition(usize),
    #[error("{frames} condition frames but {positions} positions")]
    CountMismatch { frames: usize, positions: usize },
    #[error("condition frame shape {got:?} differs from {expected:?}")]
    FrameShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("clip of {len} frames is shorter than the {need} two-stage training needs")]
    ClipTooShort { len: usize, need: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `(j+1)/(k+1)` for `j ∈ [−1, k]`; `j = −1` marks the unconditional tensor.
pub fn mask_value(j: i64, k: usize) -> Result<f64, ConditioningError> {
    if j < -1 || j > k as i64 {
        return Err(ConditioningError::MaskOutOfRange { j, k });
    }
    Ok((j + 1) as f64 / (k + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalMask {
    pub j: i64,
    pub k: usize,
    pub value: f64,
}

impl PositionalMask {
    pub fn new(j: i64, k: usize) -> Result<Self, ConditioningError> {
        Ok(Self {
            j,
            k,
            value: mask_value(j, k)?,
        })
    }

    pub fn unconditional(k: usize) -> Self {
        Self { j: -1, k, value: 0.0 }
    }

    pub fn plane(&self, height: usize, width: usize) -> Array<f32> {
        Array::full([1, height, width], self.value as f32)
    }
}

/// All-zero tensor shaped like one fragment; the context when nothing
/// precedes the current fragment.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedContext {
    u: Array<f32>,
}

impl FixedContext {
    pub fn new(fragment_shape: &[usize]) -> Self {
        Self {
            u: Array::zeros(fragment_shape.to_vec()),
        }
    }

    pub fn tensor(&self) -> &Array<f32> {
        &self.u
    }
}

/// Input of the sequence encoder for one fragment.
#[derive(Clone, Debug, PartialEq)]
pub enum GlobalSource {
    Fixed(FixedContext),
    Fragment(Array<f32>),
}

impl GlobalSource {
    pub fn tensor(&self) -> &Array<f32> {
        match self {
            Self::Fixed(u) => u.tensor(),
            Self::Fragment(f) => f,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalCondition {
    pub frame: Array<f32>,
    pub mask: PositionalMask,
}

/// Everything the denoiser is conditioned on for one fragment.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSet {
    pub local: Vec<LocalCondition>,
    pub global: GlobalSource,
    /// `[P·(C+1), H, W]`: each frame followed by its mask plane, ordered by position.
    pub y_m: Array<f32>,
}

impl ConditionSet {
    pub fn len(&self) -> usize {
        self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.local.is_empty()
    }
}

/// Pairs frames with positional masks. `None` positions are replaced by `U`
/// (zeros) with the `j = −1` mask; the supplied frame only fixes the shape.
pub fn build_condition(
    frames: &[Array<f32>],
    positions: &[Option<usize>],
    k: usize,
    global: GlobalSource,
) -> Result<ConditionSet, ConditioningError> {
    if frames.len() != positions.len() {
        return Err(ConditioningError::CountMismatch {
            frames: frames.len(),
            positions: positions.len(),
        });
    }
    let mut seen = Vec::new();
    for p in positions.iter().flatten() {
        if seen.contains(p) {
            return Err(ConditioningError::DuplicatePosition(*p));
        }
        seen.push(*p);
    }
    let frame_shape = match frames.first() {
        Some(f) if f.shape().len() == 3 => f.shape().to_vec(),
        Some(f) => {
            return Err(ConditioningError::FrameShape {
                expected: vec![0, 0, 0],
                got: f.shape().to_vec(),
            })
        }
        None => {
            return Err(ConditioningError::InvalidPlan(
                "at least one conditioning entry is required".into(),
            ))
        }
    };

    let mut local = Vec::with_capacity(frames.len());
    for (frame, pos) in frames.iter().zip(positions) {
        if frame.shape() != frame_shape.as_slice() {
            return Err(ConditioningError::FrameShape {
                expected: frame_shape.clone(),
                got: frame.shape().to_vec(),
            });
        }
        local.push(match pos {
            Some(j) => LocalCondition {
                frame: frame.clone(),
                mask: PositionalMask::new(*j as i64, k)?,
            },
            None => LocalCondition {
                frame: Array::zeros(frame_shape.clone()),
                mask: PositionalMask::unconditional(k),
            },
        });
    }
    local.sort_by_key(|c| c.mask.j);

    let (c, h, w) = (frame_shape[0], frame_shape[1], frame_shape[2]);
    let mut data = Vec::with_capacity(local.len() * (c + 1) * h * w);
    for entry in &local {
        data.extend_from_slice(entry.frame.data());
        data.extend(std::iter::repeat_n(entry.mask.value as f32, h * w));
    }
    let y_m = Array::from_vec([local.len() * (c + 1), h, w], data)?;
    Ok(ConditionSet { local, global, y_m })
}

/// Stage-1 condition draw: `cond_frames` distinct window slots chosen
/// uniformly without replacement, each independently swapped for `U` with
/// probability `1/(predict_frames + 2)`.
pub fn sample_stage_one_positions(
    rng: &mut impl Rng,
    window_len: usize,
    cond_frames: usize,
    predict_frames: usize,
) -> Vec<Option<usize>> {
    let drop = 1.0 / (predict_frames + 2) as f64;
    index::sample(rng, window_len, cond_frames.min(window_len))
        .into_iter()
        .map(|slot| if rng.random::<f64>() < drop { None } else { Some(slot) })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Extend `p` given frames forward.
    Predict,
    /// Fill the frames between `p` given frames split across both ends.
    Interpolate,
    /// Start from nothing; `context` frames carry over between fragments.
    Generate { context: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalPlan {
    Fixed,
    /// Output window of the fragment with this index.
    Previous(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FragmentPlan {
    /// Absolute frame indices covered by the denoised window.
    pub window: Range<usize>,
    /// Window slots holding conditioning frames, in slot order; `None` is `U`.
    pub condition_slots: Vec<Option<usize>>,
    /// Absolute indices this fragment contributes to the output.
    pub targets: Vec<usize>,
    pub global: GlobalPlan,
}

impl FragmentPlan {
    /// Absolute frame index behind each real conditioning slot.
    pub fn condition_frames(&self) -> Vec<usize> {
        self.condition_slots
            .iter()
            .flatten()
            .map(|s| self.window.start + s)
            .collect()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AutoregressionPlan {
    pub task: Task,
    pub p: usize,
    pub k: usize,
    pub n: usize,
    /// Absolute indices of frames supplied by the caller.
    pub given: Vec<usize>,
    pub fragments: Vec<FragmentPlan>,
}

impl AutoregressionPlan {
    pub fn window_len(&self) -> usize {
        self.fragments.first().map_or(0, |f| f.window_len())
    }

    /// Mask span used for every slot: `window_len − 1`.
    pub fn mask_span(&self) -> usize {
        self.window_len().saturating_sub(1)
    }
}

/// Lays out the fragments that produce an `n`-frame video.
///
/// Prediction windows hold `p` carried frames followed by `k` new ones;
/// there are `ceil((n−p)/k)` of them and the last is truncated to `n`.
/// Generation starts with one fully unconditional `context+k` window.
/// Interpolation is a single `p+k` window with given frames at both ends
/// (`n` is implied as `p + k`).
pub fn plan_autoregression(
    task: Task,
    p: usize,
    k: usize,
    n: usize,
) -> Result<AutoregressionPlan, ConditioningError> {
    let invalid = |msg: String| Err(ConditioningError::InvalidPlan(msg));
    if k == 0 {
        return invalid("k must be at least 1".into());
    }
    match task {
        Task::Predict => {
            if p == 0 {
                return invalid("prediction needs at least one given frame".into());
            }
            if n <= p {
                return invalid(format!("n={n} must exceed p={p}"));
            }
            let count = (n - p).div_ceil(k);
            let fragments = (0..count)
                .map(|i| carried_fragment(i, i * k, p, k, n))
                .collect();
            Ok(AutoregressionPlan {
                task,
                p,
                k,
                n,
                given: (0..p).collect(),
                fragments,
            })
        }
        Task::Generate { context } => {
            if p != 0 {
                return invalid("generation takes no given frames".into());
            }
            if n == 0 {
                return invalid("n must be positive".into());
            }
            let first_len = context + k;
            let mut fragments = vec![FragmentPlan {
                window: 0..first_len,
                condition_slots: vec![None; context],
                targets: (0..first_len.min(n)).collect(),
                global: GlobalPlan::Fixed,
            }];
            if n > first_len {
                if context == 0 {
                    return invalid("generating past one window needs context >= 1".into());
                }
                let more = (n - first_len).div_ceil(k);
                for i in 1..=more {
                    fragments.push(carried_fragment(i, i * k, context, k, n));
                }
            }
            Ok(AutoregressionPlan {
                task,
                p,
                k,
                n,
                given: Vec::new(),
                fragments,
            })
        }
        Task::Interpolate => {
            if p < 2 {
                return invalid("interpolation needs frames at both ends".into());
            }
            let len = p + k;
            let future = p / 2;
            let past = p - future;
            let slots: Vec<Option<usize>> =
                (0..past).chain(len - future..len).map(Some).collect();
            let given: Vec<usize> = slots.iter().flatten().copied().collect();
            Ok(AutoregressionPlan {
                task,
                p,
                k,
                n: len,
                given,
                fragments: vec![FragmentPlan {
                    window: 0..len,
                    condition_slots: slots,
                    targets: (past..len - future).collect(),
                    global: GlobalPlan::Fixed,
                }],
            })
        }
    }
}

fn carried_fragment(index: usize, start: usize, carry: usize, k: usize, n: usize) -> FragmentPlan {
    FragmentPlan {
        window: start..start + carry + k,
        condition_slots: (0..carry).map(Some).collect(),
        targets: (start + carry..(start + carry + k).min(n)).collect(),
        global: if index == 0 {
            GlobalPlan::Fixed
        } else {
            GlobalPlan::Previous(index - 1)
        },
    }
}

/// Frame ranges used by the two training stages of one clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageWindows {
    /// Stage-1 denoising target `[0, P+K)`.
    pub stage_one: Range<usize>,
    /// Stage-2 prediction target `[K+P, 2K+P)`.
    pub stage_two_target: Range<usize>,
    /// Frames of the stage-1 reconstruction used as stage-2 conditions, `[K, K+P)`.
    pub stage_two_condition: Range<usize>,
}

impl StageWindows {
    /// Window the model denoises in stage 2: the condition frames followed by
    /// the target, `[K, 2K+P)`.
    pub fn stage_two_window(&self) -> Range<usize> {
        self.stage_two_condition.start..self.stage_two_target.end
    }
}

pub fn select_stage_windows(
    len: usize,
    cond_frames: usize,
    predict_frames: usize,
) -> Result<StageWindows, ConditioningError> {
    let (p, k) = (cond_frames, predict_frames);
    let need = 2 * k + p;
    if len < need {
        return Err(ConditioningError::ClipTooShort { len, need });
    }
    Ok(StageWindows {
        stage_one: 0..p + k,
        stage_two_target: k + p..2 * k + p,
        stage_two_condition: k..k + p,
    })
}
