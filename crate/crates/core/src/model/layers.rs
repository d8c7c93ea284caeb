//! Building blocks shared by the denoiser and the sequence encoder.
//!
//! Every layer stores [`ParamId`]s into one [`ParamStore`] and records its
//! forward pass on a caller-owned [`Graph`]. Feature maps are batched
//! `[N, C, H, W]`.

use rand::Rng;

use super::params::{Init, ParamId, ParamStore};
use crate::numerics::{Array, Graph, NumericsError, Real, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Registers parameters under a dotted prefix.
pub struct LayerBuilder<'a, E: Real, R: Rng> {
    store: &'a mut ParamStore<E>,
    rng: &'a mut R,
}

impl<'a, E: Real, R: Rng> LayerBuilder<'a, E, R> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = init.build(shape, self.rng);
        self.store.add(name, value)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Square `size×size` convolution with "same" padding at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Real, R: Rng>(
        b: &mut LayerBuilder<E, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        stride: usize,
        bias: bool,
        zero: bool,
    ) -> Self {
        let fan_in = c_in * size * size;
        let init = if zero { Init::Zeros } else { Init::FanIn(fan_in) };
        let weight = b.add(&format!("{name}.weight"), &[c_out, c_in, size, size], init);
        let bias = bias.then(|| {
            let init = if zero { Init::Zeros } else { Init::FanIn(fan_in) };
            b.add(&format!("{name}.bias"), &[c_out], init)
        });
        Self {
            weight,
            bias,
            stride,
            pad: size / 2,
        }
    }

    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let w = ps.var(g, self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = ps.var(g, b);
                g.add_bias(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

/// `x·W + b` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<E: Real, R: Rng>(
        b: &mut LayerBuilder<E, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self {
            weight: b.add(&format!("{name}.weight"), &[d_in, d_out], Init::FanIn(d_in)),
            bias: b.add(&format!("{name}.bias"), &[d_out], Init::FanIn(d_in)),
        }
    }

    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let w = ps.var(g, self.weight);
        let b = ps.var(g, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new<E: Real, R: Rng>(
        b: &mut LayerBuilder<E, R>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        Self {
            gamma: b.add(&format!("{name}.gamma"), &[channels], Init::Ones),
            beta: b.add(&format!("{name}.beta"), &[channels], Init::Zeros),
            groups,
        }
    }

    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let gamma = ps.var(g, self.gamma);
        let beta = ps.var(g, self.beta);
        g.group_norm(x, gamma, beta, self.groups, NORM_EPS)
    }
}

/// Standard DDPM sinusoid: `[sin(t·f_0) … sin(t·f_{h−1}), cos(t·f_0) … ]`
/// with `f_i = 10000^(−i/h)` and `h = dim/2`. One row per entry of `t`.
pub fn sinusoidal_embedding<E: Real>(t: &[usize], dim: usize) -> Array<E> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let row_start = data.len();
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(E::of((step as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(E::of((step as f64 * freq).cos()));
        }
        data.resize(row_start + dim, E::zero());
    }
    Array::from_vec([t.len(), dim], data).expect("length matches shape")
}

/// Sinusoid followed by `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub sinusoid_dim: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TimeEmbedding {
    pub fn new<E: Real, R: Rng>(
        b: &mut LayerBuilder<E, R>,
        name: &str,
        sinusoid_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            sinusoid_dim,
            fc1: Linear::new(b, &format!("{name}.fc1"), sinusoid_dim, out_dim),
            fc2: Linear::new(b, &format!("{name}.fc2"), out_dim, out_dim),
        }
    }

    /// `[N, out_dim]` for one step per batch entry.
    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        t: &[usize],
    ) -> Result<Var, NumericsError> {
        let s = g.constant(sinusoidal_embedding(t, self.sinusoid_dim));
        let h = self.fc1.forward(g, ps, s)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, ps, h)
    }
}

/// `GN → SiLU → conv3 (+ time projection) → GN → SiLU → conv3`, plus skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv,
    pub time: Option<Linear>,
    pub norm2: Norm,
    pub conv2: Conv,
    pub skip: Option<Conv>,
    pub c_in: usize,
    pub c_out: usize,
}

impl ResBlock {
    /// `time_dim == None` builds a block without time conditioning.
    pub fn new<E: Real, R: Rng>(
        b: &mut LayerBuilder<E, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: Option<usize>,
        groups: usize,
    ) -> Self {
        Self {
            norm1: Norm::new(b, &format!("{name}.norm1"), c_in, groups),
            conv1: Conv::new(b, &format!("{name}.conv1"), c_in, c_out, 3, 1, true, false),
            time: time_dim.map(|d| Linear::new(b, &format!("{name}.time"), d, c_out)),
            norm2: Norm::new(b, &format!("{name}.norm2"), c_out, groups),
            conv2: Conv::new(b, &format!("{name}.conv2"), c_out, c_out, 3, 1, true, true),
            skip: (c_in != c_out)
                .then(|| Conv::new(b, &format!("{name}.skip"), c_in, c_out, 1, 1, true, false)),
            c_in,
            c_out,
        }
    }

    /// `temb` is the already activated time embedding `SiLU(e(t))`.
    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        x: Var,
        temb: Option<Var>,
    ) -> Result<Var, NumericsError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.c_in {
            return Err(NumericsError::InvalidShape {
                op: "res_block",
                shape,
                reason: format!("expected {} input channels", self.c_in),
            });
        }
        let h = self.norm1.forward(g, ps, x)?;
        let h = g.silu(h)?;
        let mut h = self.conv1.forward(g, ps, h)?;
        if let (Some(time), Some(temb)) = (&self.time, temb) {
            let proj = time.forward(g, ps, temb)?;
            h = g.add_channel_vec(h, proj)?;
        }
        let h = self.norm2.forward(g, ps, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, ps, h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, ps, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Scaled dot-product attention on `q: [N,d,Sq]`, `k, v: [N,d,Sk]`.
/// Returns the attended values `[N,d,Sq]` and the weights `[N,Sq,Sk]`.
fn attend<E: Real>(
    g: &mut Graph<E>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var), NumericsError> {
    let d = g.shape(q)[1];
    let logits = g.bmm(q, k, true, false)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax(logits, 2)?;
    let out = g.bmm(v, weights, false, true)?;
    Ok((out, weights))
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: Norm,
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub out: Conv,
}

impl SelfAttention {
    pub fn new<E: Real, R: Rng>(
        b: &mut LayerBuilder<E, R>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        let proj = |b: &mut LayerBuilder<E, R>, part: &str| {
            Conv::new(b, &format!("{name}.{part}"), channels, channels, 1, 1, true, false)
        };
        Self {
            norm: Norm::new(b, &format!("{name}.norm"), channels, groups),
            q: proj(b, "q"),
            k: proj(b, "k"),
            v: proj(b, "v"),
            out: proj(b, "out"),
        }
    }

    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        x: Var,
    ) -> Result<Var, NumericsError> {
        self.forward_with_weights(g, ps, x).map(|(y, _)| y)
    }

    /// Also returns the `[N, HW, HW]` attention weights.
    pub fn forward_with_weights<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        x: Var,
    ) -> Result<(Var, Var), NumericsError> {
        let shape = g.shape(x).to_vec();
        let (n, c, s) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = self.norm.forward(g, ps, x)?;
        let mut qkv = [x; 3];
        for (slot, conv) in qkv.iter_mut().zip([&self.q, &self.k, &self.v]) {
            let p = conv.forward(g, ps, h)?;
            *slot = g.reshape(p, &[n, c, s])?;
        }
        let (att, weights) = attend(g, qkv[0], qkv[1], qkv[2])?;
        let att = g.reshape(att, &shape)?;
        let y = self.out.forward(g, ps, att)?;
        Ok((g.add(x, y)?, weights))
    }
}

/// Queries from the feature map, keys and values from global-context tokens.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: Norm,
    pub wq: Conv,
    pub wk: Conv,
    pub wv: Conv,
    pub wo: Conv,
    pub token_width: usize,
}

impl CrossAttention {
    /// `channels` is the feature width, `token_width` the width of `z`, and
    /// `d` the shared projection width.
    pub fn new<E: Real, R: Rng>(
        b: &mut LayerBuilder<E, R>,
        name: &str,
        channels: usize,
        token_width: usize,
        d: usize,
        groups: usize,
    ) -> Self {
        let proj = |b: &mut LayerBuilder<E, R>, part: &str, c_in, c_out| {
            Conv::new(b, &format!("{name}.{part}"), c_in, c_out, 1, 1, false, false)
        };
        Self {
            norm: Norm::new(b, &format!("{name}.norm"), channels, groups),
            wq: proj(b, "wq", channels, d),
            wk: proj(b, "wk", token_width, d),
            wv: proj(b, "wv", token_width, d),
            wo: proj(b, "wo", d, channels),
            token_width,
        }
    }

    /// `f: [N,C,H,W]`, `z: [N, token_width, S]`.
    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        f: Var,
        z: Var,
    ) -> Result<Var, NumericsError> {
        self.forward_with_weights(g, ps, f, z).map(|(y, _)| y)
    }

    pub fn forward_with_weights<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        f: Var,
        z: Var,
    ) -> Result<(Var, Var), NumericsError> {
        let fs = g.shape(f).to_vec();
        let zs = g.shape(z).to_vec();
        if zs.len() != 3 || zs[0] != fs[0] || zs[1] != self.token_width {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_attention",
                lhs: fs,
                rhs: zs,
            });
        }
        let (n, s) = (zs[0], zs[2]);
        let h = self.norm.forward(g, ps, f)?;
        let q = self.wq.forward(g, ps, h)?;
        let d = g.shape(q)[1];
        let q = g.reshape(q, &[n, d, fs[2] * fs[3]])?;
        let z4 = g.reshape(z, &[n, self.token_width, s, 1])?;
        let k = self.wk.forward(g, ps, z4)?;
        let k = g.reshape(k, &[n, d, s])?;
        let v = self.wv.forward(g, ps, z4)?;
        let v = g.reshape(v, &[n, d, s])?;
        let (att, weights) = attend(g, q, k, v)?;
        let att = g.reshape(att, &[n, d, fs[2], fs[3]])?;
        let y = self.wo.forward(g, ps, att)?;
        Ok((g.add(f, y)?, weights))
    }
}
