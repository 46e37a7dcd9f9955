//! Shared trainable building blocks. Parameters live in the [`ParamStore`];
//! each layer holds ids and binds values into the graph per forward pass.
//!
//! Initialization: truncated normal σ=0.02 for projections and convolutions,
//! zeros for biases and for the final output layer of residual blocks and
//! heads.

use crate::error::{Error, Result};
use crate::numerics::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

pub const INIT_SIGMA: f64 = 0.02;

pub fn trunc_normal_tensor(rng: &mut RngStream, shape: Vec<usize>, sigma: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.trunc_normal(sigma)).collect())
}

/// Largest of {4, 2, 1} dividing the channel count.
pub fn norm_groups(channels: usize) -> usize {
    [4usize, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, d_in: usize, d_out: usize, name: &str) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            trunc_normal_tensor(rng, vec![d_in, d_out], INIT_SIGMA),
            true,
        );
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![d_out]), true);
        Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        }
    }

    /// Zero-initialized variant for output heads.
    pub fn new_zero(store: &mut ParamStore, d_in: usize, d_out: usize, name: &str) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(vec![d_in, d_out]), true);
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![d_out]), true);
        Self {
            w,
            b: Some(b),
            d_in,
            d_out,
        }
    }

    /// x: [m, d_in] -> [m, d_out]
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let mut out = g.matmul(x, w);
        if let Some(b) = self.b {
            let bv = g.param(store, b);
            out = g.add_bias(out, bv);
        }
        out
    }

    /// x: [b, n, d_in] -> [b, n, d_out]
    pub fn forward_3d(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, vec![s[0] * s[1], s[2]]);
        let out = self.forward(g, store, flat);
        g.reshape(out, vec![s[0], s[1], self.d_out])
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        name: &str,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            trunc_normal_tensor(rng, vec![c_out, c_in, k, k], INIT_SIGMA),
            true,
        );
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![c_out]), true);
        Self { w, b, stride, pad }
    }

    pub fn new_zero(
        store: &mut ParamStore,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        name: &str,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            Tensor::zeros(vec![c_out, c_in, k, k]),
            true,
        );
        let b = store.add(&format!("{name}.b"), Tensor::zeros(vec![c_out]), true);
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub fn new(store: &mut ParamStore, n: usize, name: &str) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(vec![n], 1.0), true),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(vec![n]), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn new(store: &mut ParamStore, channels: usize, name: &str) -> Self {
        Self {
            gamma: store.add(
                &format!("{name}.gamma"),
                Tensor::full(vec![channels], 1.0),
                true,
            ),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(vec![channels]), true),
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups, 1e-5)
    }
}

/// Pre-norm residual convolution block with optional timestep injection
/// after the first convolution.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNormLayer,
    conv1: Conv2dLayer,
    norm2: GroupNormLayer,
    conv2: Conv2dLayer,
    temb_proj: Option<Linear>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        channels: usize,
        d_temb: Option<usize>,
        name: &str,
    ) -> Self {
        Self {
            norm1: GroupNormLayer::new(store, channels, &format!("{name}.norm1")),
            conv1: Conv2dLayer::new(store, rng, channels, channels, 3, 1, 1, &format!("{name}.conv1")),
            norm2: GroupNormLayer::new(store, channels, &format!("{name}.norm2")),
            conv2: Conv2dLayer::new_zero(store, channels, channels, 3, 1, 1, &format!("{name}.conv2")),
            temb_proj: d_temb
                .map(|d| Linear::new(store, rng, d, channels, &format!("{name}.temb"))),
        }
    }

    pub fn conv2_weight_id(&self) -> ParamId {
        self.conv2.w
    }

    /// `temb`: [B, d_temb] when the block was built with timestep injection.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, store, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, store, h);
        if let (Some(proj), Some(temb)) = (&self.temb_proj, temb) {
            let t = g.silu(temb);
            let t = proj.forward(g, store, t);
            h = g.add_channel_vec(h, t);
        }
        let h = self.norm2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h);
        g.add(x, h)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// input widths.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        d_q_in: usize,
        d_kv_in: usize,
        d_model: usize,
        heads: usize,
        name: &str,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} must divide d_model {d_model}"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, rng, d_q_in, d_model, &format!("{name}.wq")),
            wk: Linear::new(store, rng, d_kv_in, d_model, &format!("{name}.wk")),
            wv: Linear::new(store, rng, d_kv_in, d_model, &format!("{name}.wv")),
            wo: Linear::new(store, rng, d_model, d_model, &format!("{name}.wo")),
            heads,
            d_model,
        })
    }

    /// q_in: [B, nq, d_q_in], kv_in: [B, nk, d_kv_in] -> [B, nq, d_model]
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q_in: Var, kv_in: Var) -> Var {
        self.forward_with_weights(g, store, q_in, kv_in).0
    }

    /// Also returns the [B·heads, nq, nk] attention weights.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
    ) -> (Var, Var) {
        let (b, nq) = (g.shape(q_in)[0], g.shape(q_in)[1]);
        let nk = g.shape(kv_in)[1];
        let (h, dh) = (self.heads, self.d_model / self.heads);
        let q = self.wq.forward_3d(g, store, q_in);
        let k = self.wk.forward_3d(g, store, kv_in);
        let v = self.wv.forward_3d(g, store, kv_in);
        let split = |g: &mut Graph, x: Var, n: usize| {
            let x = g.reshape(x, vec![b, n, h, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, vec![b * h, n, dh])
        };
        let q = split(g, q, nq);
        let k = split(g, k, nk);
        let v = split(g, v, nk);
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt);
        let scaled = g.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0);
        let attn = g.softmax_last(scaled);
        let ctx = g.bmm(attn, v);
        let ctx = g.reshape(ctx, vec![b, h, nq, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let merged = g.reshape(ctx, vec![b, nq, self.d_model]);
        (self.wo.forward_3d(g, store, merged), attn)
    }
}

/// Sinusoidal position features for a scalar timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
        let ang = t as f64 * freq;
        out[i] = ang.sin();
        out[half + i] = ang.cos();
    }
    Tensor::new(vec![dim], out)
}

/// Repeat a [dim] embedding across a batch: [B, dim].
pub fn broadcast_rows(g: &mut Graph, row: &Tensor, batch: usize) -> Var {
    let dim = row.len();
    let mut data = Vec::with_capacity(batch * dim);
    for _ in 0..batch {
        data.extend_from_slice(row.data());
    }
    g.constant(Tensor::new(vec![batch, dim], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::autodiff::check;

    #[test]
    fn linear_shapes_and_bias() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(50, "lin");
        let lin = Linear::new(&mut store, &mut rng, 4, 3, "lin");
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 4]));
        let y = lin.forward(&mut g, &store, x);
        assert_eq!(g.shape(y), &[2, 3]);
        // Zero input -> bias only -> zeros here.
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_weights_are_a_distribution() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(51, "attn");
        let attn = MultiHeadAttention::new(&mut store, &mut rng, 16, 6, 16, 4, "attn").unwrap();
        let mut g = Graph::new();
        let q = g.constant(rng.normal_tensor(vec![2, 1, 16]));
        let kv = g.constant(rng.normal_tensor(vec![2, 5, 6]));
        let (out, w) = attn.forward_with_weights(&mut g, &store, q, kv);
        assert_eq!(g.shape(out), &[2, 1, 16]);
        assert_eq!(g.shape(w), &[8, 1, 5]);
        for row in g.value(w).data().chunks(5) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_count_must_divide_model_width() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(52, "attn2");
        assert!(MultiHeadAttention::new(&mut store, &mut rng, 8, 8, 10, 4, "a").is_err());
    }

    #[test]
    fn attention_gradients_pass_fd() {
        let mut rng = RngStream::new(53, "attngrad");
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, &mut rng, 6, 4, 8, 2, "attn").unwrap();
        store.randomize(&mut rng, 0.2);
        let q_in = rng.normal_tensor(vec![2, 3, 6]);
        let kv_in = rng.normal_tensor(vec![2, 5, 4]);
        let worst = check::grad_check_params(&mut store, 4, 1e-5, |g, s| {
            let q = g.constant(q_in.clone());
            let kv = g.constant(kv_in.clone());
            let out = attn.forward(g, s, q, kv);
            let sq = g.mul(out, out);
            g.mean_all(sq)
        })
        .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn resblock_gradients_pass_fd() {
        let mut rng = RngStream::new(54, "rb");
        let mut store = ParamStore::new();
        let rb = ResBlock::new(&mut store, &mut rng, 4, Some(6), "rb");
        store.randomize(&mut rng, 0.2);
        let x_in = rng.normal_tensor(vec![2, 4, 3, 3]);
        let t_in = rng.normal_tensor(vec![2, 6]);
        let worst = check::grad_check_params(&mut store, 3, 1e-5, |g, s| {
            let x = g.constant(x_in.clone());
            let t = g.constant(t_in.clone());
            let out = rb.forward(g, s, x, Some(t));
            let sq = g.mul(out, out);
            g.mean_all(sq)
        })
        .unwrap();
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn sinusoidal_embedding_is_bounded_and_distinct() {
        let a = sinusoidal_embedding(1, 32);
        let b = sinusoidal_embedding(300, 32);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 0.1);
    }
}
