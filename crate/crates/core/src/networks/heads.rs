//! Forecast heads: the convolutional map from reconstructed images to the
//! visual forecast branch, and the gated fusion that blends both branches.

use crate::error::{Error, Result};
use crate::networks::layers::{Conv2dLayer, GroupNormLayer, Linear};
use crate::numerics::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

/// Two stride-2 convolution stages, flatten, zero-initialized linear map to
/// pred_len·D.
#[derive(Debug, Clone)]
pub struct VisionHead {
    conv1: Conv2dLayer,
    norm1: GroupNormLayer,
    conv2: Conv2dLayer,
    norm2: GroupNormLayer,
    fc: Linear,
    pub image_size: usize,
    pub pred_len: usize,
    pub dims: usize,
    params: Vec<ParamId>,
}

impl VisionHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        image_size: usize,
        channels: usize,
        pred_len: usize,
        dims: usize,
    ) -> Result<Self> {
        if image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} must be divisible by 4"
            )));
        }
        let start = store.len();
        let conv1 = Conv2dLayer::new(store, rng, 3, channels, 3, 2, 1, "vision_head.conv1");
        let norm1 = GroupNormLayer::new(store, channels, "vision_head.norm1");
        let conv2 = Conv2dLayer::new(store, rng, channels, 2 * channels, 3, 2, 1, "vision_head.conv2");
        let norm2 = GroupNormLayer::new(store, 2 * channels, "vision_head.norm2");
        let side = image_size / 4;
        let fc = Linear::new_zero(store, 2 * channels * side * side, pred_len * dims, "vision_head.fc");
        let params = (start..store.len()).map(ParamId).collect();
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            fc,
            image_size,
            pred_len,
            dims,
            params,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// img: [B, 3, S, S] -> Z_VE: [B, pred_len, D]
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, img: Var) -> Result<Var> {
        let s = g.shape(img).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::Dimension(format!(
                "vision head expects B×3×{0}×{0}, got {s:?}",
                self.image_size
            )));
        }
        let b = s[0];
        let h = self.conv1.forward(g, store, img);
        let h = self.norm1.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        let h = self.norm2.forward(g, store, h);
        let h = g.silu(h);
        let side = self.image_size / 4;
        let flat = g.reshape(h, vec![b, g.shape(h)[1] * side * side]);
        let out = self.fc.forward(g, store, flat);
        Ok(g.reshape(out, vec![b, self.pred_len, self.dims]))
    }
}

/// Ŷ = g ⊙ Z_TE + (1−g) ⊙ Z_VE with g = sigmoid(MLP([Z_TE; Z_VE])).
#[derive(Debug, Clone)]
pub struct GatedFusion {
    mlp_in: Linear,
    mlp_out: Linear,
    pub dims: usize,
    params: Vec<ParamId>,
}

impl GatedFusion {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, dims: usize, d_fusion: usize) -> Self {
        let start = store.len();
        let mlp_in = Linear::new(store, rng, 2 * dims, d_fusion, "fusion.mlp_in");
        let mlp_out = Linear::new_zero(store, d_fusion, dims, "fusion.mlp_out");
        let params = (start..store.len()).map(ParamId).collect();
        Self {
            mlp_in,
            mlp_out,
            dims,
            params,
        }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Returns (Ŷ, gate), both [B, H, D]. `gate_override` forces a constant
    /// gate, bypassing the MLP (diagnostic hook).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_te: Var,
        z_ve: Var,
        gate_override: Option<f64>,
    ) -> Result<(Var, Var)> {
        let s = g.shape(z_te).to_vec();
        if s != g.shape(z_ve) {
            return Err(Error::Dimension(format!(
                "fusion branches differ: {:?} vs {:?}",
                s,
                g.shape(z_ve)
            )));
        }
        if s.len() != 3 || s[2] != self.dims {
            return Err(Error::Dimension(format!(
                "fusion expects B×H×{}, got {s:?}",
                self.dims
            )));
        }
        let (b, h, d) = (s[0], s[1], s[2]);
        let gate = match gate_override {
            Some(v) => g.constant(Tensor::full(vec![b, h, d], v)),
            None => {
                let cat = g.concat(&[z_te, z_ve], 2);
                let flat = g.reshape(cat, vec![b * h, 2 * d]);
                let mid = self.mlp_in.forward(g, store, flat);
                let mid = g.silu(mid);
                let logits = self.mlp_out.forward(g, store, mid);
                let logits = g.reshape(logits, vec![b, h, d]);
                g.sigmoid_op(logits)
            }
        };
        let a = g.mul(gate, z_te);
        let ones_minus = g.affine(gate, -1.0, 1.0);
        let bpart = g.mul(ones_minus, z_ve);
        Ok((g.add(a, bpart), gate))
    }
}
