//! Small convolutional VAE with an 8× spatial compression
//! (3×S×S ↔ C_z×S/8×S/8).

use crate::error::{Error, Result};
use crate::networks::layers::{Conv2dLayer, GroupNormLayer, ResBlock};
use crate::numerics::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    pub image_size: usize,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 8,
            latent_channels: 4,
            image_size: 64,
            kl_weight: 1e-6,
        }
    }
}

impl VaeConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / 8
    }
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: VaeConfig,
    conv_in: Conv2dLayer,
    enc_blocks: Vec<(ResBlock, Conv2dLayer)>,
    enc_mid: ResBlock,
    enc_norm: GroupNormLayer,
    enc_out: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec_mid: ResBlock,
    dec_blocks: Vec<(ResBlock, Conv2dLayer)>,
    dec_norm: GroupNormLayer,
    dec_out: Conv2dLayer,
    params: Vec<ParamId>,
}

impl Vae {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, cfg: VaeConfig) -> Result<Self> {
        if cfg.image_size % 8 != 0 || cfg.image_size < 8 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 8",
                cfg.image_size
            )));
        }
        let start = store.len();
        let c = cfg.base_channels;
        let widths = [c, 2 * c, 3 * c, 4 * c];
        let conv_in = Conv2dLayer::new(store, rng, cfg.in_channels, widths[0], 3, 1, 1, "vae.enc.in");
        let mut enc_blocks = Vec::new();
        for i in 0..3 {
            let rb = ResBlock::new(store, rng, widths[i], None, &format!("vae.enc.res{i}"));
            let down = Conv2dLayer::new(
                store,
                rng,
                widths[i],
                widths[i + 1],
                3,
                2,
                1,
                &format!("vae.enc.down{i}"),
            );
            enc_blocks.push((rb, down));
        }
        let enc_mid = ResBlock::new(store, rng, widths[3], None, "vae.enc.mid");
        let enc_norm = GroupNormLayer::new(store, widths[3], "vae.enc.norm");
        let enc_out = Conv2dLayer::new(
            store,
            rng,
            widths[3],
            2 * cfg.latent_channels,
            3,
            1,
            1,
            "vae.enc.out",
        );
        let dec_in = Conv2dLayer::new(store, rng, cfg.latent_channels, widths[3], 3, 1, 1, "vae.dec.in");
        let dec_mid = ResBlock::new(store, rng, widths[3], None, "vae.dec.mid");
        let mut dec_blocks = Vec::new();
        for i in 0..3 {
            let rb = ResBlock::new(store, rng, widths[3 - i], None, &format!("vae.dec.res{i}"));
            let up = Conv2dLayer::new(
                store,
                rng,
                widths[3 - i],
                widths[2 - i],
                3,
                1,
                1,
                &format!("vae.dec.up{i}"),
            );
            dec_blocks.push((rb, up));
        }
        let dec_norm = GroupNormLayer::new(store, widths[0], "vae.dec.norm");
        let dec_out = Conv2dLayer::new_zero(store, widths[0], cfg.in_channels, 3, 1, 1, "vae.dec.out");
        let params = (start..store.len()).map(ParamId).collect();
        Ok(Self {
            cfg,
            conv_in,
            enc_blocks,
            enc_mid,
            enc_norm,
            enc_out,
            dec_in,
            dec_mid,
            dec_blocks,
            dec_norm,
            dec_out,
            params,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Diagonal-Gaussian parameters over the latent grid. Input pixels in
    /// [0, 1] are mapped to [−1, 1] internally.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<(Var, Var)> {
        let s = g.shape(img).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size {
            return Err(Error::Dimension(format!(
                "vae encode expects B×{}×{}×{}, got {s:?}",
                self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size
            )));
        }
        let x = g.affine(img, 2.0, -1.0);
        let mut h = self.conv_in.forward(g, store, x);
        for (rb, down) in &self.enc_blocks {
            h = rb.forward(g, store, h, None);
            h = down.forward(g, store, h);
        }
        h = self.enc_mid.forward(g, store, h, None);
        h = self.enc_norm.forward(g, store, h);
        h = g.silu(h);
        let stats = self.enc_out.forward(g, store, h);
        let cz = self.cfg.latent_channels;
        let mean = g.slice(stats, 1, 0, cz);
        let logvar_raw = g.slice(stats, 1, cz, cz);
        let logvar = g.clamp(logvar_raw, -30.0, 20.0);
        Ok((mean, logvar))
    }

    /// Reparameterized sample z = μ + exp(½·logvar)·ε.
    pub fn sample(&self, g: &mut Graph, mean: Var, logvar: Var, eps: &Tensor) -> Var {
        let half = g.affine(logvar, 0.5, 0.0);
        let std = g.exp(half);
        let e = g.constant(eps.clone());
        let scaled = g.mul(std, e);
        g.add(mean, scaled)
    }

    /// Decode a latent back to a [0, 1]-clamped image.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let ls = self.cfg.latent_size();
        if s.len() != 4 || s[1] != self.cfg.latent_channels || s[2] != ls || s[3] != ls {
            return Err(Error::Dimension(format!(
                "vae decode expects B×{}×{ls}×{ls}, got {s:?}",
                self.cfg.latent_channels
            )));
        }
        let mut h = self.dec_in.forward(g, store, z);
        h = self.dec_mid.forward(g, store, h, None);
        for (rb, up) in &self.dec_blocks {
            h = rb.forward(g, store, h, None);
            h = g.upsample_nearest2(h);
            h = up.forward(g, store, h);
        }
        h = self.dec_norm.forward(g, store, h);
        h = g.silu(h);
        let out = self.dec_out.forward(g, store, h);
        let shifted = g.affine(out, 0.5, 0.5);
        Ok(g.clamp(shifted, 0.0, 1.0))
    }

    /// −½·mean(1 + logvar − μ² − exp(logvar))
    pub fn kl(&self, g: &mut Graph, mean: Var, logvar: Var) -> Var {
        let mu2 = g.mul(mean, mean);
        let ev = g.exp(logvar);
        let one_plus = g.affine(logvar, 1.0, 1.0);
        let a = g.sub(one_plus, mu2);
        let b = g.sub(a, ev);
        let m = g.mean_all(b);
        g.affine(m, -0.5, 0.0)
    }
}
