use rand::Rng;

use super::layers::{Conv, CrossAttention, LayerBuilder, Norm, ResBlock, SelfAttention, TimeEmbedding};
use super::params::ParamStore;
use super::ModelConfig;
use crate::numerics::{Graph, NumericsError, Real, Var};

/// Two-level encoder followed by the middle block. Shared layout of the
/// denoiser's front half and the sequence encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub conv_in: Conv,
    pub enc1_res: ResBlock,
    pub enc1_attn: SelfAttention,
    pub down1: Conv,
    pub enc2_res: ResBlock,
    pub enc2_attn: SelfAttention,
    pub down2: Conv,
    pub mid_res: ResBlock,
    pub mid_attn: SelfAttention,
    prefix: String,
}

/// Feature maps the decoder needs from the encoder.
pub struct EncoderOutput {
    pub skip1: Var,
    pub skip2: Var,
    pub mid: Var,
}

impl Encoder {
    fn new<E: Real, R: Rng>(
        b: &mut LayerBuilder<E, R>,
        prefix: &str,
        in_channels: usize,
        cfg: &ModelConfig,
        time_dim: Option<usize>,
    ) -> Self {
        let (c1, c2, gr) = (cfg.base_width, 2 * cfg.base_width, cfg.groups);
        let n = |part: &str| format!("{prefix}.{part}");
        Self {
            conv_in: Conv::new(b, &n("conv_in"), in_channels, c1, 3, 1, true, false),
            enc1_res: ResBlock::new(b, &n("enc1.res"), c1, c1, time_dim, gr),
            enc1_attn: SelfAttention::new(b, &n("enc1.attn"), c1, gr),
            down1: Conv::new(b, &n("down1"), c1, c1, 3, 2, true, false),
            enc2_res: ResBlock::new(b, &n("enc2.res"), c1, c2, time_dim, gr),
            enc2_attn: SelfAttention::new(b, &n("enc2.attn"), c2, gr),
            down2: Conv::new(b, &n("down2"), c2, c2, 3, 2, true, false),
            mid_res: ResBlock::new(b, &n("mid.res"), c2, c2, time_dim, gr),
            mid_attn: SelfAttention::new(b, &n("mid.attn"), c2, gr),
            prefix: prefix.to_string(),
        }
    }

    fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        x: Var,
        temb: Option<Var>,
    ) -> Result<EncoderOutput, NumericsError> {
        let p = &self.prefix;
        g.set_scope(format!("{p}.conv_in"));
        let h = self.conv_in.forward(g, ps, x)?;
        g.set_scope(format!("{p}.enc1"));
        let h = self.enc1_res.forward(g, ps, h, temb)?;
        let skip1 = self.enc1_attn.forward(g, ps, h)?;
        g.set_scope(format!("{p}.down1"));
        let h = self.down1.forward(g, ps, skip1)?;
        g.set_scope(format!("{p}.enc2"));
        let h = self.enc2_res.forward(g, ps, h, temb)?;
        let skip2 = self.enc2_attn.forward(g, ps, h)?;
        g.set_scope(format!("{p}.down2"));
        let h = self.down2.forward(g, ps, skip2)?;
        g.set_scope(format!("{p}.mid"));
        let h = self.mid_res.forward(g, ps, h, temb)?;
        let mid = self.mid_attn.forward(g, ps, h)?;
        Ok(EncoderOutput { skip1, skip2, mid })
    }
}

/// Sequence encoder: the encoder stack without time conditioning. Its middle
/// feature map, flattened over space, is the global-context token sequence.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub stack: Encoder,
}

impl SequenceEncoder {
    pub(crate) fn new<E: Real, R: Rng>(b: &mut LayerBuilder<E, R>, cfg: &ModelConfig) -> Self {
        Self {
            stack: Encoder::new(b, "seq", cfg.fragment_channels(), cfg, None),
        }
    }

    /// `fragment: [N, W·C, H, W]` → tokens `[N, 2·base, H/4 · W/4]`.
    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        fragment: Var,
    ) -> Result<Var, NumericsError> {
        let mid = self.stack.forward(g, ps, fragment, None)?.mid;
        let s = g.shape(mid).to_vec();
        g.reshape(mid, &[s[0], s[1], s[2] * s[3]])
    }
}

/// The denoiser: encoder, middle block with cross-attention, and a mirrored
/// decoder with skip connections. Predicts `v` for the whole window.
#[derive(Clone, Debug)]
pub struct UNet {
    pub time: TimeEmbedding,
    pub encoder: Encoder,
    pub mid_cross: CrossAttention,
    pub up2: Conv,
    pub dec2_res: ResBlock,
    pub dec2_attn: SelfAttention,
    pub dec2_cross: CrossAttention,
    pub up1: Conv,
    pub dec1_res: ResBlock,
    pub dec1_attn: SelfAttention,
    pub out_norm: Norm,
    pub out_conv: Conv,
}

impl UNet {
    pub(crate) fn new<E: Real, R: Rng>(b: &mut LayerBuilder<E, R>, cfg: &ModelConfig) -> Self {
        let (c1, c2, gr, td) = (cfg.base_width, 2 * cfg.base_width, cfg.groups, cfg.time_dim);
        let zc = cfg.token_width();
        Self {
            time: TimeEmbedding::new(b, "unet.time", cfg.base_width, td),
            encoder: Encoder::new(b, "unet", cfg.in_channels(), cfg, Some(td)),
            mid_cross: CrossAttention::new(b, "unet.mid.cross", c2, zc, c2, gr),
            up2: Conv::new(b, "unet.up2", c2, c2, 3, 1, true, false),
            dec2_res: ResBlock::new(b, "unet.dec2.res", 2 * c2, c2, Some(td), gr),
            dec2_attn: SelfAttention::new(b, "unet.dec2.attn", c2, gr),
            dec2_cross: CrossAttention::new(b, "unet.dec2.cross", c2, zc, c2, gr),
            up1: Conv::new(b, "unet.up1", c2, c2, 3, 1, true, false),
            dec1_res: ResBlock::new(b, "unet.dec1.res", c2 + c1, c1, Some(td), gr),
            dec1_attn: SelfAttention::new(b, "unet.dec1.attn", c1, gr),
            out_norm: Norm::new(b, "unet.out.norm", c1, gr),
            out_conv: Conv::new(b, "unet.out.conv", c1, cfg.fragment_channels(), 3, 1, true, true),
        }
    }

    /// `x_t: [N, W·C, H, W]`, `y_m: [N, P·(C+1), H, W]`, `z: [N, Cz, S]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Real>(
        &self,
        g: &mut Graph<E>,
        ps: &ParamStore<E>,
        x_t: Var,
        t: &[usize],
        y_m: Var,
        z: Var,
    ) -> Result<Var, NumericsError> {
        g.set_scope("unet.time");
        let temb = self.time.forward(g, ps, t)?;
        let temb = g.silu(temb)?;
        g.set_scope("unet.input");
        let x = g.concat_channels(x_t, y_m)?;
        let enc = self.encoder.forward(g, ps, x, Some(temb))?;

        g.set_scope("unet.mid.cross");
        let h = self.mid_cross.forward(g, ps, enc.mid, z)?;

        g.set_scope("unet.dec2");
        let h = g.upsample2x(h)?;
        let h = self.up2.forward(g, ps, h)?;
        let h = g.concat_channels(h, enc.skip2)?;
        let h = self.dec2_res.forward(g, ps, h, Some(temb))?;
        let h = self.dec2_attn.forward(g, ps, h)?;
        g.set_scope("unet.dec2.cross");
        let h = self.dec2_cross.forward(g, ps, h, z)?;

        g.set_scope("unet.dec1");
        let h = g.upsample2x(h)?;
        let h = self.up1.forward(g, ps, h)?;
        let h = g.concat_channels(h, enc.skip1)?;
        let h = self.dec1_res.forward(g, ps, h, Some(temb))?;
        let h = self.dec1_attn.forward(g, ps, h)?;

        g.set_scope("unet.out");
        let h = self.out_norm.forward(g, ps, h)?;
        let h = g.silu(h)?;
        self.out_conv.forward(g, ps, h)
    }
}
