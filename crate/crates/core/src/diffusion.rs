//! Noise schedules, forward diffusion, posterior moments, parameterization
//! conversions and the spaced-timestep ancestral sampler.
//!
//! Steps are 1-based: `t ∈ 1..=T`. Index 0 holds the `ᾱ_0 = 1` convention so
//! the posterior is defined at `t = 1`.

use std::error::Error as StdError;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numerics::{Array, NumericsError, Real};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to derived betas.
pub const MAX_BETA: f64 = 0.999;
/// `ᾱ_t` below this makes `x̂_0` recovery from ε ill-conditioned.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

pub type DenoiserError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule needs at least one step")]
    ZeroSteps,
    #[error("step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("requested {steps} sampling steps but the schedule has {max}")]
    TooManySteps { steps: usize, max: usize },
    #[error("alpha_bar at step {t} is {value:e}, too small to divide by")]
    DegenerateAlphaBar { t: usize, value: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(
        "denoiser produced non-finite output at sampling step {step} (t={t}); value range [{min}, {max}]"
    )]
    NonFiniteModelOutput {
        step: usize,
        t: usize,
        min: f64,
        max: f64,
    },
    #[error("denoiser failed at t={t}: {source}")]
    Denoiser {
        t: usize,
        #[source]
        source: DenoiserError,
    },
}

/// Per-step tables of a `T`-step variance schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_beta: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `ᾱ(t) = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1+s))·π/2)`,
    /// with betas derived from consecutive ratios and clipped at [`MAX_BETA`].
    pub fn cosine(steps: usize) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::ZeroSteps);
        }
        let f = |t: usize| {
            let phase = ((t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET))
                * std::f64::consts::FRAC_PI_2;
            phase.cos().powi(2)
        };
        let betas: Vec<f64> = (1..=steps)
            .map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
            .collect();
        Ok(Self::from_betas(&betas))
    }

    /// Builds the tables from `β_1..β_T`.
    pub fn from_betas(betas: &[f64]) -> Self {
        let mut beta = Vec::with_capacity(betas.len() + 1);
        let mut alpha = Vec::with_capacity(betas.len() + 1);
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        for &b in betas {
            let prev = *alpha_bar.last().unwrap();
            beta.push(b);
            alpha.push(1.0 - b);
            alpha_bar.push(prev * (1.0 - b));
        }
        Self::finish(beta, alpha, alpha_bar)
    }

    /// Builds the tables from `ᾱ_1..ᾱ_T`, keeping those values exactly.
    pub fn from_alpha_bar(values: &[f64]) -> Self {
        let mut beta = vec![0.0];
        let mut alpha = vec![1.0];
        let mut alpha_bar = vec![1.0];
        for &ab in values {
            let prev = *alpha_bar.last().unwrap();
            let a = ab / prev;
            alpha.push(a);
            beta.push(1.0 - a);
            alpha_bar.push(ab);
        }
        Self::finish(beta, alpha, alpha_bar)
    }

    fn finish(beta: Vec<f64>, alpha: Vec<f64>, alpha_bar: Vec<f64>) -> Self {
        let posterior_beta = (0..beta.len())
            .map(|t| {
                if t == 0 {
                    0.0
                } else {
                    (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t]
                }
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            posterior_beta,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t`.
    pub fn posterior_beta(&self, t: usize) -> f64 {
        self.posterior_beta[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// Uniformly strided sub-chain of `steps` steps ending at `T`, re-expressed
    /// as its own schedule with the same `ᾱ` at the selected steps.
    pub fn respace(&self, steps: usize) -> Result<SpacedSchedule, DiffusionError> {
        let total = self.steps();
        if steps == 0 {
            return Err(DiffusionError::ZeroSteps);
        }
        if steps > total {
            return Err(DiffusionError::TooManySteps { steps, max: total });
        }
        let timesteps: Vec<usize> = (1..=steps).map(|i| i * total / steps).collect();
        let alpha_bars: Vec<f64> = timesteps.iter().map(|&t| self.alpha_bar[t]).collect();
        Ok(SpacedSchedule {
            timesteps,
            schedule: Self::from_alpha_bar(&alpha_bars),
        })
    }
}

/// Sampling sub-chain: `timesteps[i-1]` is the original step behind
/// respaced step `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpacedSchedule {
    pub timesteps: Vec<usize>,
    pub schedule: NoiseSchedule,
}

/// Mean and variance of `q(x_{t−1} | x_t, x_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments<E: Real = f32> {
    pub mean: Array<E>,
    pub variance: f64,
}

fn combine<E: Real>(
    a: &Array<E>,
    ca: f64,
    b: &Array<E>,
    cb: f64,
) -> Result<Array<E>, DiffusionError> {
    Ok(a.zip_map(b, |x, y| E::of(ca * x.as_f64() + cb * y.as_f64()))?)
}

/// `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<E: Real>(
    x0: &Array<E>,
    t: usize,
    eps: &Array<E>,
    sched: &NoiseSchedule,
) -> Result<Array<E>, DiffusionError> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Posterior mean `μ̃_t(x_t, x_0)` and variance `β̃_t`.
pub fn posterior_moments<E: Real>(
    x0: &Array<E>,
    xt: &Array<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<PosteriorMoments<E>, DiffusionError> {
    sched.check_step(t)?;
    let (c0, ct) = posterior_coefficients(sched, t);
    Ok(PosteriorMoments {
        mean: combine(x0, c0, xt, ct)?,
        variance: sched.posterior_beta(t),
    })
}

/// Coefficients of `x_0` and `x_t` in the posterior mean.
pub fn posterior_coefficients(sched: &NoiseSchedule, t: usize) -> (f64, f64) {
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * sched.beta(t) / (1.0 - ab);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    (c0, ct)
}

/// `x̂_0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn x0_from_eps<E: Real>(
    xt: &Array<E>,
    eps_hat: &Array<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<E>, DiffusionError> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    if ab < MIN_ALPHA_BAR {
        return Err(DiffusionError::DegenerateAlphaBar { t, value: ab });
    }
    let inv = 1.0 / ab.sqrt();
    combine(xt, inv, eps_hat, -(1.0 - ab).sqrt() * inv)
}

/// `v = √ᾱ_t·ε − √(1−ᾱ_t)·x_0`.
pub fn v_from_x0_eps<E: Real>(
    x0: &Array<E>,
    eps: &Array<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<E>, DiffusionError> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    combine(eps, ab.sqrt(), x0, -(1.0 - ab).sqrt())
}

/// `x̂_0 = √ᾱ_t·x_t − √(1−ᾱ_t)·v̂`.
pub fn x0_from_v<E: Real>(
    xt: &Array<E>,
    v_hat: &Array<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<E>, DiffusionError> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    combine(xt, ab.sqrt(), v_hat, -(1.0 - ab).sqrt())
}

/// `ε̂ = √(1−ᾱ_t)·x_t + √ᾱ_t·v̂`.
pub fn eps_from_v<E: Real>(
    xt: &Array<E>,
    v_hat: &Array<E>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<E>, DiffusionError> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    combine(xt, (1.0 - ab).sqrt(), v_hat, ab.sqrt())
}

/// Anything that predicts `v̂` for a noisy input at an original-schedule step.
pub trait Denoiser {
    fn predict_v(&self, x_t: &Array<f32>, t: usize) -> Result<Array<f32>, DenoiserError>;
}

impl<F> Denoiser for F
where
    F: Fn(&Array<f32>, usize) -> Result<Array<f32>, DenoiserError>,
{
    fn predict_v(&self, x_t: &Array<f32>, t: usize) -> Result<Array<f32>, DenoiserError> {
        self(x_t, t)
    }
}

/// Unit Gaussian array drawn from `rng`.
pub fn gaussian<E: Real>(shape: &[usize], rng: &mut impl rand::Rng) -> Array<E> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            E::of(v)
        })
        .collect();
    Array::from_vec(shape.to_vec(), data).expect("length matches shape")
}

/// Ancestral DDPM sampling on a `steps`-step respacing of `sched`.
///
/// Starts from unit Gaussian noise; each step clips `x̂_0` to `[−1, 1]` and
/// draws `x_{t−1} ~ N(μ̃(x̂_0, x_t), β̃·I)`. The last step returns the mean.
/// The conditioning lives inside `model` (see `LgcModel::denoiser`).
pub fn ddpm_sample(
    model: &impl Denoiser,
    shape: &[usize],
    steps: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array<f32>, DiffusionError> {
    let spaced = sched.respace(steps)?;
    let chain = &spaced.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Array<f32> = gaussian(shape, &mut rng);
    for i in (1..=steps).rev() {
        let t = spaced.timesteps[i - 1];
        let v = model
            .predict_v(&x, t)
            .map_err(|source| DiffusionError::Denoiser { t, source })?;
        if v.shape() != x.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "ddpm_sample",
                lhs: x.shape().to_vec(),
                rhs: v.shape().to_vec(),
            }
            .into());
        }
        if !v.is_finite() {
            let (min, max) = v.min_max();
            return Err(DiffusionError::NonFiniteModelOutput {
                step: i,
                t,
                min,
                max,
            });
        }
        let x0 = x0_from_v(&x, &v, i, chain)?.map(|p| p.clamp(-1.0, 1.0));
        let moments = posterior_moments(&x0, &x, i, chain)?;
        x = if i > 1 {
            let sigma = moments.variance.sqrt();
            let z: Array<f32> = gaussian(shape, &mut rng);
            combine(&moments.mean, 1.0, &z, sigma)?
        } else {
            moments.mean
        };
    }
    Ok(x)
}

/// Denoiser that knows the clean sample and returns the exact `v` for any `x_t`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub x0: Array<f32>,
    pub schedule: NoiseSchedule,
}

impl Denoiser for OracleDenoiser {
    fn predict_v(&self, x_t: &Array<f32>, t: usize) -> Result<Array<f32>, DenoiserError> {
        let ab = self.schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.zip_map(&self.x0, |xt, x0| {
            let (xt, x0) = (xt.as_f64(), x0.as_f64());
            let eps = (xt - sa * x0) / sb;
            (sa * eps - sb * x0) as f32
        })?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(data: &[f64]) -> Array<f64> {
        Array::from_f64([data.len()], data).unwrap()
    }

    /// Schedule with a single step whose ᾱ is exactly 0.64.
    fn pythagorean() -> NoiseSchedule {
        NoiseSchedule::from_alpha_bar(&[0.64])
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1000) <= 1e-4);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) <= MAX_BETA);
        }
        assert!(matches!(
            NoiseSchedule::cosine(0),
            Err(DiffusionError::ZeroSteps)
        ));
    }

    #[test]
    fn cosine_matches_closed_form_before_clipping() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        for t in [1usize, 10, 250, 500, 900, 990] {
            let expected = f(t as f64) / f(0.0);
            assert!((s.alpha_bar(t) - expected).abs() <= 1e-12 * expected.max(1e-12));
        }
    }

    #[test]
    fn q_sample_cases() {
        let s = pythagorean();
        let x0 = arr(&[1.0, 1.0]);
        let out = q_sample(&x0, 1, &arr(&[1.0, 1.0]), &s).unwrap();
        for &v in out.data() {
            assert!((v - 1.4).abs() < 1e-12);
        }
        let zero = q_sample(&x0, 1, &arr(&[0.0, 0.0]), &s).unwrap();
        assert!((zero.data()[0] - 0.8).abs() < 1e-12);
        assert!(q_sample(&x0, 1, &arr(&[0.0]), &s).is_err());
        assert!(q_sample(&x0, 2, &arr(&[0.0, 0.0]), &s).is_err());
    }

    #[test]
    fn q_sample_pure_noise_limit() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = arr(&[0.7, -0.3]);
        let eps = arr(&[0.2, -1.1]);
        let xt = q_sample(&x0, 1000, &eps, &s).unwrap();
        assert!(xt.max_abs_diff(&eps).unwrap() < 1e-3);
    }

    #[test]
    fn posterior_collapses_at_first_step() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = arr(&[0.3, -0.2]);
        let xt = arr(&[1.5, 0.9]);
        let m = posterior_moments(&x0, &xt, 1, &s).unwrap();
        assert_eq!(m.variance, 0.0);
        assert!(m.mean.max_abs_diff(&x0).unwrap() < 1e-15);
        assert!(posterior_moments(&x0, &xt, 0, &s).is_err());
    }

    #[test]
    fn posterior_mean_of_equal_inputs() {
        // The two coefficients only sum to one at t = 1; for larger steps the
        // mean of (x, x) shrinks toward zero by their sum.
        let s = NoiseSchedule::cosine(1000).unwrap();
        let (a, b) = posterior_coefficients(&s, 1);
        assert_eq!(a + b, 1.0);
        let x = arr(&[0.5, -0.25]);
        for t in [1usize, 2, 50, 500, 999] {
            let (c0, ct) = posterior_coefficients(&s, t);
            let m = posterior_moments(&x, &x, t, &s).unwrap();
            for (got, want) in m.mean.data().iter().zip(x.data()) {
                assert!((got - (c0 + ct) * want).abs() < 1e-15);
            }
            assert!((c0 + ct - 1.0).abs() < 1e-5 || t > 100);
        }
    }

    #[test]
    fn v_endpoints() {
        let s = NoiseSchedule::from_alpha_bar(&[1.0, 0.5]);
        let eps = arr(&[0.4, -0.9]);
        let v = v_from_x0_eps(&arr(&[3.0, 2.0]), &eps, 1, &s).unwrap();
        assert_eq!(v, eps);
        let v0 = v_from_x0_eps(&arr(&[0.0, 0.0]), &eps, 2, &s).unwrap();
        let r = 0.5f64.sqrt();
        assert!((v0.data()[0] - r * 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_predictions() {
        let s = pythagorean();
        let xt = arr(&[1.0, -2.0]);
        let zero = arr(&[0.0, 0.0]);
        let from_eps = x0_from_eps(&xt, &zero, 1, &s).unwrap();
        assert!((from_eps.data()[1] + 2.0 / 0.8).abs() < 1e-12);
        let from_v = x0_from_v(&xt, &zero, 1, &s).unwrap();
        assert!((from_v.data()[1] + 2.0 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn x0_from_eps_guards_tiny_alpha_bar() {
        let s = NoiseSchedule::from_alpha_bar(&[1e-13]);
        let a = arr(&[1.0]);
        assert!(matches!(
            x0_from_eps(&a, &a, 1, &s),
            Err(DiffusionError::DegenerateAlphaBar { .. })
        ));
    }

    #[test]
    fn respacing_cases() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let same = s.respace(1000).unwrap();
        assert_eq!(same.timesteps, (1..=1000).collect::<Vec<_>>());
        for t in 1..=1000 {
            assert!((same.schedule.beta(t) - s.beta(t)).abs() < 1e-9);
        }
        let hundred = s.respace(100).unwrap();
        assert_eq!(hundred.timesteps.len(), 100);
        assert_eq!(*hundred.timesteps.last().unwrap(), 1000);
        for (i, &t) in hundred.timesteps.iter().enumerate() {
            assert_eq!(hundred.schedule.alpha_bar(i + 1), s.alpha_bar(t));
        }
        let one = s.respace(1).unwrap();
        assert_eq!(one.timesteps, vec![1000]);
        assert!((one.schedule.beta(1) - (1.0 - s.alpha_bar(1000))).abs() < 1e-15);
        assert!(matches!(
            s.respace(1001),
            Err(DiffusionError::TooManySteps { .. })
        ));
    }

    #[test]
    fn non_finite_denoiser_output_aborts() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let bad = |x: &Array<f32>, _t: usize| -> Result<Array<f32>, DenoiserError> {
            Ok(x.map(|_| f32::NAN))
        };
        let err = ddpm_sample(&bad, &[4], 10, &s, 0).unwrap_err();
        assert!(matches!(
            err,
            DiffusionError::NonFiniteModelOutput { step: 10, t: 10, .. }
        ));
    }
}
