//! Conditional U-Net noise predictor over the latent grid: one
//! downsampling level with a projected additive skip, self- and
//! cross-attention at the lowest resolution, and timestep injection into
//! every residual block.

use crate::error::{Error, Result};
use crate::networks::layers::{
    broadcast_rows, sinusoidal_embedding, Conv2dLayer, GroupNormLayer, Linear, MultiHeadAttention,
    ResBlock,
};
use crate::numerics::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::numerics::rng::RngStream;

#[derive(Debug, Clone)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub d_timestep: usize,
    /// Width of the condition vector c_m.
    pub d_model: usize,
    pub heads: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            d_timestep: 64,
            d_model: 256,
            heads: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2dLayer,
    down_block: ResBlock,
    down_conv: Conv2dLayer,
    mid_block1: ResBlock,
    mid_norm_self: GroupNormLayer,
    self_attn: MultiHeadAttention,
    mid_norm_cross: GroupNormLayer,
    cross_attn: MultiHeadAttention,
    mid_block2: ResBlock,
    up_conv: Conv2dLayer,
    skip_proj: Conv2dLayer,
    up_block: ResBlock,
    out_norm: GroupNormLayer,
    conv_out: Conv2dLayer,
    params: Vec<ParamId>,
}

impl UNet {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, cfg: UNetConfig) -> Result<Self> {
        let c = cfg.base_channels;
        let mid = 2 * c;
        if cfg.heads == 0 || mid % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "attention heads {} must divide mid width {mid}",
                cfg.heads
            )));
        }
        let start = store.len();
        let d_t = cfg.d_timestep;
        // Timestep injection must be visible at initialization, so none of
        // the U-Net layers are zero-initialized.
        let temb1 = Linear::new(store, rng, d_t, d_t, "unet.temb1");
        let temb2 = Linear::new(store, rng, d_t, d_t, "unet.temb2");
        let conv_in = Conv2dLayer::new(store, rng, cfg.latent_channels, c, 3, 1, 1, "unet.in");
        let down_block = res_block_dense(store, rng, c, d_t, "unet.down");
        let down_conv = Conv2dLayer::new(store, rng, c, mid, 3, 2, 1, "unet.downsample");
        let mid_block1 = res_block_dense(store, rng, mid, d_t, "unet.mid1");
        let mid_norm_self = GroupNormLayer::new(store, mid, "unet.norm_self");
        let self_attn = MultiHeadAttention::new(store, rng, mid, mid, mid, cfg.heads, "unet.self")?;
        let mid_norm_cross = GroupNormLayer::new(store, mid, "unet.norm_cross");
        let cross_attn =
            MultiHeadAttention::new(store, rng, mid, cfg.d_model, mid, cfg.heads, "unet.cross")?;
        let mid_block2 = res_block_dense(store, rng, mid, d_t, "unet.mid2");
        let up_conv = Conv2dLayer::new(store, rng, mid, c, 3, 1, 1, "unet.upsample");
        let skip_proj = Conv2dLayer::new(store, rng, c, c, 1, 1, 0, "unet.skip");
        let up_block = res_block_dense(store, rng, c, d_t, "unet.up");
        let out_norm = GroupNormLayer::new(store, c, "unet.out_norm");
        let conv_out = Conv2dLayer::new(store, rng, c, cfg.latent_channels, 3, 1, 1, "unet.out");
        let params = (start..store.len()).map(ParamId).collect();
        Ok(Self {
            cfg,
            temb1,
            temb2,
            conv_in,
            down_block,
            down_conv,
            mid_block1,
            mid_norm_self,
            self_attn,
            mid_norm_cross,
            cross_attn,
            mid_block2,
            up_conv,
            skip_proj,
            up_block,
            out_norm,
            conv_out,
            params,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// ε̂ = U(z_t, t, c_m); shape-preserving over the latent.
    pub fn predict_noise(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_t: Var,
        t: usize,
        c_m: Var,
    ) -> Result<Var> {
        let zs = g.shape(z_t).to_vec();
        if zs.len() != 4 || zs[1] != self.cfg.latent_channels {
            return Err(Error::Dimension(format!(
                "latent shape {zs:?} incompatible with {} channels",
                self.cfg.latent_channels
            )));
        }
        if zs[2] % 2 != 0 || zs[3] % 2 != 0 {
            return Err(Error::Dimension(format!(
                "latent spatial extents must be even, got {zs:?}"
            )));
        }
        if t < 1 {
            return Err(Error::Index("timestep must be >= 1".into()));
        }
        let b = zs[0];
        if g.shape(c_m) != [b, self.cfg.d_model] {
            return Err(Error::Validation(format!(
                "condition shape {:?}, expected [{b}, {}]",
                g.shape(c_m),
                self.cfg.d_model
            )));
        }
        // Two-layer timestep MLP with SiLU.
        let emb = sinusoidal_embedding(t, self.cfg.d_timestep);
        let temb = broadcast_rows(g, &emb, b);
        let temb = self.temb1.forward(g, store, temb);
        let temb = g.silu(temb);
        let temb = self.temb2.forward(g, store, temb);

        let h = self.conv_in.forward(g, store, z_t);
        let skip = self.down_block.forward(g, store, h, Some(temb));
        let h = self.down_conv.forward(g, store, skip);
        let h = self.mid_block1.forward(g, store, h, Some(temb));
        let h = self.spatial_attention(g, store, h, c_m, true);
        let h = self.spatial_attention(g, store, h, c_m, false);
        let h = self.mid_block2.forward(g, store, h, Some(temb));
        let h = g.upsample_nearest2(h);
        let h = self.up_conv.forward(g, store, h);
        let projected_skip = self.skip_proj.forward(g, store, skip);
        let h = g.add(h, projected_skip);
        let h = self.up_block.forward(g, store, h, Some(temb));
        let h = self.out_norm.forward(g, store, h);
        let h = g.silu(h);
        Ok(self.conv_out.forward(g, store, h))
    }

    /// Residual attention over the spatial tokens; self-attention attends
    /// position-to-position, cross-attention keys on the condition vector.
    fn spatial_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        c_m: Var,
        selfattn: bool,
    ) -> Var {
        let s = g.shape(h).to_vec();
        let (b, c, hh, ww) = (s[0], s[1], s[2], s[3]);
        let normed = if selfattn {
            self.mid_norm_self.forward(g, store, h)
        } else {
            self.mid_norm_cross.forward(g, store, h)
        };
        let flat = g.reshape(normed, vec![b, c, hh * ww]);
        let tokens = g.permute(flat, &[0, 2, 1]);
        let out = if selfattn {
            self.self_attn.forward(g, store, tokens, tokens)
        } else {
            let kv = g.reshape(c_m, vec![b, 1, self.cfg.d_model]);
            self.cross_attn.forward(g, store, tokens, kv)
        };
        let back = g.permute(out, &[0, 2, 1]);
        let grid = g.reshape(back, vec![b, c, hh, ww]);
        g.add(h, grid)
    }
}

fn res_block_dense(
    store: &mut ParamStore,
    rng: &mut RngStream,
    channels: usize,
    d_t: usize,
    name: &str,
) -> ResBlock {
    let rb = ResBlock::new(store, rng, channels, Some(d_t), name);
    // Replace the zero-initialized second convolution with a small random
    // one; see module doc.
    let id = rb.conv2_weight_id();
    let p = store.get_mut(id);
    p.value = crate::networks::layers::trunc_normal_tensor(
        rng,
        p.value.shape().to_vec(),
        crate::networks::layers::INIT_SIGMA,
    );
    rb
}
