//! The conditional denoising UNet and its global sequence encoder.

pub mod layers;
pub mod params;
mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use params::{Init, ParamId, ParamStore};
pub use unet::{Encoder, EncoderOutput, SequenceEncoder, UNet};

use crate::diffusion::{Denoiser, DenoiserError};
use crate::numerics::{Array, Graph, NumericsError, Real, Var};
use layers::LayerBuilder;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Architecture hyperparameters. The denoiser always sees a window of
/// `cond_frames + pred_frames` frames folded into channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels per frame.
    pub channels: usize,
    /// `P`: condition frames.
    pub cond_frames: usize,
    /// `K`: frames predicted per fragment.
    pub pred_frames: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub time_dim: usize,
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            cond_frames: 2,
            pred_frames: 6,
            height: 16,
            width: 16,
            base_width: 32,
            time_dim: 64,
            groups: 8,
        }
    }
}

impl ModelConfig {
    /// Tiny single-channel configuration for finite-difference checks.
    pub fn toy() -> Self {
        Self {
            channels: 1,
            cond_frames: 1,
            pred_frames: 3,
            height: 8,
            width: 8,
            base_width: 4,
            time_dim: 8,
            groups: 2,
        }
    }

    /// Frames per denoising window, `P + K`.
    pub fn window(&self) -> usize {
        self.cond_frames + self.pred_frames
    }

    /// Channels of a window with frames folded into channels.
    pub fn fragment_channels(&self) -> usize {
        self.window() * self.channels
    }

    pub fn fragment_shape(&self) -> [usize; 3] {
        [self.fragment_channels(), self.height, self.width]
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Channels of the `y·m` condition stack.
    pub fn condition_channels(&self) -> usize {
        self.cond_frames * (self.channels + 1)
    }

    pub fn in_channels(&self) -> usize {
        self.fragment_channels() + self.condition_channels()
    }

    pub fn token_width(&self) -> usize {
        2 * self.base_width
    }

    pub fn token_count(&self) -> usize {
        (self.height / 4) * (self.width / 4)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if [self.channels, self.cond_frames, self.pred_frames, self.base_width, self.time_dim, self.groups]
            .contains(&0)
        {
            return fail("all sizes must be positive".into());
        }
        if self.height < 4 || self.width < 4 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return fail(format!(
                "spatial size {}x{} must be a positive multiple of 4",
                self.height, self.width
            ));
        }
        if !self.base_width.is_multiple_of(self.groups) {
            return fail(format!(
                "base width {} not divisible into {} groups",
                self.base_width, self.groups
            ));
        }
        if !self.time_dim.is_multiple_of(2) || !self.base_width.is_multiple_of(2) {
            return fail("time and base widths must be even".into());
        }
        Ok(())
    }
}

/// Token sequence summarizing a fragment, `[tokens, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalContext<E: Real = f32> {
    tokens: Array<E>,
}

impl<E: Real> GlobalContext<E> {
    pub fn tokens(&self) -> &Array<E> {
        &self.tokens
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn token_width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn from_tokens(tokens: Array<E>) -> Result<Self, ModelError> {
        if tokens.shape().len() != 2 {
            return Err(ModelError::Shape {
                what: "global context",
                expected: vec![0, 0],
                got: tokens.shape().to_vec(),
            });
        }
        Ok(Self { tokens })
    }

    /// Channel-major `[1, channels, tokens]` constant for a graph.
    fn to_var(&self, g: &mut Graph<E>) -> Result<Var, NumericsError> {
        let (s, c) = (self.token_count(), self.token_width());
        let src = self.tokens.data();
        let data = (0..c * s).map(|i| src[(i % s) * c + i / s]).collect();
        Ok(g.constant(Array::from_vec([1, c, s], data)?))
    }

    fn from_channel_major(a: &Array<E>) -> Self {
        let (c, s) = (a.shape()[1], a.shape()[2]);
        let src = a.data();
        let data = (0..s * c).map(|i| src[(i % c) * s + i / c]).collect();
        Self {
            tokens: Array::from_vec([s, c], data).expect("length matches shape"),
        }
    }
}

/// Denoiser and sequence encoder parameters with their layer layout.
#[derive(Clone, Debug)]
pub struct LgcModel<E: Real = f32> {
    config: ModelConfig,
    params: ParamStore<E>,
    unet: UNet,
    encoder: SequenceEncoder,
    global_disabled: bool,
}

impl<E: Real> LgcModel<E> {
    /// Builds a freshly initialized model; weights depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut b = LayerBuilder::new(&mut params, &mut rng);
        let unet = UNet::new(&mut b, &config);
        let encoder = SequenceEncoder::new(&mut b, &config);
        Ok(Self {
            config,
            params,
            unet,
            encoder,
            global_disabled: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn sequence_encoder(&self) -> &SequenceEncoder {
        &self.encoder
    }

    /// Same architecture with parameters converted to another element type.
    pub fn cast<F: Real>(&self) -> LgcModel<F> {
        LgcModel {
            config: self.config.clone(),
            params: self.params.cast(),
            unet: self.unet.clone(),
            encoder: self.encoder.clone(),
            global_disabled: self.global_disabled,
        }
    }

    /// Value projections of every cross-attention layer.
    pub fn global_value_params(&self) -> [ParamId; 2] {
        [self.unet.mid_cross.wv.weight, self.unet.dec2_cross.wv.weight]
    }

    /// Zeroes and freezes the cross-attention value projections, making the
    /// output exactly independent of the global context.
    pub fn disable_global_context(&mut self) {
        for id in self.global_value_params() {
            for v in self.params.get_mut(id).data_mut() {
                *v = E::zero();
            }
            self.params.freeze(id);
        }
        self.global_disabled = true;
    }

    pub fn global_disabled(&self) -> bool {
        self.global_disabled
    }

    /// Records the sequence encoder: `[N, W·C, H, W]` → `[N, Cz, S]`.
    pub fn encode(&self, g: &mut Graph<E>, fragment: Var) -> Result<Var, ModelError> {
        self.expect_batched("fragment", g.shape(fragment), self.config.fragment_channels())?;
        Ok(self.encoder.forward(g, &self.params, fragment)?)
    }

    /// Records the denoiser. Returns `v̂` shaped like `x_t`.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        x_t: Var,
        t: &[usize],
        y_m: Var,
        z: Var,
    ) -> Result<Var, ModelError> {
        let n = self.expect_batched("x_t", g.shape(x_t), self.config.fragment_channels())?;
        let ny = self.expect_batched("y_m", g.shape(y_m), self.config.condition_channels())?;
        let zs = g.shape(z).to_vec();
        let z_expected = vec![n, self.config.token_width(), self.config.token_count()];
        if zs != z_expected {
            return Err(ModelError::Shape {
                what: "z",
                expected: z_expected,
                got: zs,
            });
        }
        if ny != n || t.len() != n {
            return Err(ModelError::Shape {
                what: "batch",
                expected: vec![n],
                got: vec![ny, t.len()],
            });
        }
        Ok(self.unet.forward(g, &self.params, x_t, t, y_m, z)?)
    }

    fn expect_batched(
        &self,
        what: &'static str,
        shape: &[usize],
        channels: usize,
    ) -> Result<usize, ModelError> {
        let c = &self.config;
        match shape {
            &[n, ch, h, w] if ch == channels && h == c.height && w == c.width => Ok(n),
            _ => Err(ModelError::Shape {
                what,
                expected: vec![0, channels, c.height, c.width],
                got: shape.to_vec(),
            }),
        }
    }

    fn unbatched(&self, what: &'static str, a: &Array<E>, channels: usize) -> Result<Array<E>, ModelError> {
        let expected = [channels, self.config.height, self.config.width];
        if a.shape() != expected {
            return Err(ModelError::Shape {
                what,
                expected: expected.to_vec(),
                got: a.shape().to_vec(),
            });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(&expected);
        Ok(a.clone().reshape(shape)?)
    }

    /// Global context of a single fragment `[W·C, H, W]`.
    pub fn global_context(&self, fragment: &Array<E>) -> Result<GlobalContext<E>, ModelError> {
        let x = self.unbatched("fragment", fragment, self.config.fragment_channels())?;
        let mut g = Graph::new();
        let x = g.constant(x);
        let z = self.encode(&mut g, x)?;
        Ok(GlobalContext::from_channel_major(g.value(z)))
    }

    /// `v̂` for a single window `x_t: [W·C, H, W]` with `y_m: [P·(C+1), H, W]`.
    pub fn predict_v(
        &self,
        x_t: &Array<E>,
        t: usize,
        y_m: &Array<E>,
        z: &GlobalContext<E>,
    ) -> Result<Array<E>, ModelError> {
        let x = self.unbatched("x_t", x_t, self.config.fragment_channels())?;
        let y = self.unbatched("y_m", y_m, self.config.condition_channels())?;
        let mut g = Graph::new();
        let (x, y) = (g.constant(x), g.constant(y));
        let z = z.to_var(&mut g)?;
        let v = self.forward(&mut g, x, &[t], y, z)?;
        Ok(g.value(v).clone().reshape(x_t.shape().to_vec())?)
    }
}

impl LgcModel<f32> {
    /// Binds conditions so the model can drive a sampler.
    pub fn denoiser<'a>(
        &'a self,
        y_m: &'a Array<f32>,
        z: &'a GlobalContext<f32>,
    ) -> BoundDenoiser<'a> {
        BoundDenoiser { model: self, y_m, z }
    }
}

/// A model with fixed local and global conditions.
pub struct BoundDenoiser<'a> {
    model: &'a LgcModel<f32>,
    y_m: &'a Array<f32>,
    z: &'a GlobalContext<f32>,
}

impl Denoiser for BoundDenoiser<'_> {
    fn predict_v(&self, x_t: &Array<f32>, t: usize) -> Result<Array<f32>, DenoiserError> {
        Ok(self.model.predict_v(x_t, t, self.y_m, self.z)?)
    }
}
