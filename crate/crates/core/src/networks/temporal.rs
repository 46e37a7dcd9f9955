//! Channel-independent patch-transformer temporal encoder: each feature is
//! patched, run through pre-norm transformer blocks, flattened, and linearly
//! projected to the prediction horizon.

use crate::error::{Error, Result};
use crate::networks::layers::{LayerNormLayer, Linear, MultiHeadAttention};
use crate::numerics::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::numerics::rng::RngStream;

#[derive(Debug, Clone)]
pub struct TemporalConfig {
    pub seq_len: usize,
    pub pred_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub padding: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
}

impl TemporalConfig {
    pub fn patch_count(&self) -> usize {
        (self.seq_len + self.padding - self.patch_len) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNormLayer,
    attn: MultiHeadAttention,
    ln2: LayerNormLayer,
    mlp_in: Linear,
    mlp_out: Linear,
}

#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub cfg: TemporalConfig,
    patch_embed: Linear,
    blocks: Vec<EncoderBlock>,
    head: Linear,
    params: Vec<ParamId>,
}

impl TemporalEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, cfg: TemporalConfig) -> Result<Self> {
        if cfg.seq_len < cfg.patch_len {
            return Err(Error::Config(format!(
                "seq_len {} shorter than patch length {}",
                cfg.seq_len, cfg.patch_len
            )));
        }
        if cfg.stride == 0 {
            return Err(Error::Config("patch stride must be positive".into()));
        }
        let start = store.len();
        let patch_embed = Linear::new(store, rng, cfg.patch_len, cfg.d_model, "temporal.embed");
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            blocks.push(EncoderBlock {
                ln1: LayerNormLayer::new(store, cfg.d_model, &format!("temporal.{l}.ln1")),
                attn: MultiHeadAttention::new(
                    store,
                    rng,
                    cfg.d_model,
                    cfg.d_model,
                    cfg.d_model,
                    cfg.heads,
                    &format!("temporal.{l}.attn"),
                )?,
                ln2: LayerNormLayer::new(store, cfg.d_model, &format!("temporal.{l}.ln2")),
                mlp_in: Linear::new(store, rng, cfg.d_model, cfg.d_ff, &format!("temporal.{l}.mlp_in")),
                mlp_out: Linear::new(store, rng, cfg.d_ff, cfg.d_model, &format!("temporal.{l}.mlp_out")),
            });
        }
        let head = Linear::new(
            store,
            rng,
            cfg.patch_count() * cfg.d_model,
            cfg.pred_len,
            "temporal.head",
        );
        let params = (start..store.len()).map(ParamId).collect();
        Ok(Self {
            cfg,
            patch_embed,
            blocks,
            head,
            params,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Zero the attention and MLP output projections, making every block the
    /// identity. Verification hook for the residual-path contract.
    pub fn zero_block_outputs(&self, store: &mut ParamStore) {
        for blk in &self.blocks {
            for id in [blk.attn.wo.w, blk.attn.wo.b.unwrap(), blk.mlp_out.w, blk.mlp_out.b.unwrap()] {
                let p = store.get_mut(id);
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Patch embedding plus head only, skipping the transformer blocks.
    pub fn forward_embed_head_only(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_norm: Var,
    ) -> Result<Var> {
        self.forward_inner(g, store, x_norm, true)
    }

    /// X_norm: [B, L, D] -> Z_TE: [B, pred_len, D]
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_norm: Var) -> Result<Var> {
        self.forward_inner(g, store, x_norm, false)
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_norm: Var,
        skip_blocks: bool,
    ) -> Result<Var> {
        let s = g.shape(x_norm).to_vec();
        if s.len() != 3 || s[1] != self.cfg.seq_len {
            return Err(Error::Dimension(format!(
                "temporal encoder expects B×{}×D, got {s:?}",
                self.cfg.seq_len
            )));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let np = self.cfg.patch_count();
        // Channel-independent instances: [B, L, D] -> [B·D, L]
        let chans = g.permute(x_norm, &[0, 2, 1]);
        let inst = g.reshape(chans, vec![b * d, l]);
        let padded = g.pad_last_replicate(inst, self.cfg.padding);
        let patches = g.unfold1d(padded, self.cfg.patch_len, self.cfg.stride);
        let flat = g.reshape(patches, vec![b * d * np, self.cfg.patch_len]);
        let embedded = self.patch_embed.forward(g, store, flat);
        let mut h = g.reshape(embedded, vec![b * d, np, self.cfg.d_model]);
        if !skip_blocks {
            for blk in &self.blocks {
                let n1 = blk.ln1.forward(g, store, h);
                let att = blk.attn.forward(g, store, n1, n1);
                let h1 = g.add(h, att);
                let n2 = blk.ln2.forward(g, store, h1);
                let n2f = g.reshape(n2, vec![b * d * np, self.cfg.d_model]);
                let mid = blk.mlp_in.forward(g, store, n2f);
                let mid = g.silu(mid);
                let out = blk.mlp_out.forward(g, store, mid);
                let out3 = g.reshape(out, vec![b * d, np, self.cfg.d_model]);
                h = g.add(h1, out3);
            }
        }
        let flat = g.reshape(h, vec![b * d, np * self.cfg.d_model]);
        let proj = self.head.forward(g, store, flat);
        let per_chan = g.reshape(proj, vec![b, d, self.cfg.pred_len]);
        Ok(g.permute(per_chan, &[0, 2, 1]))
    }
}
