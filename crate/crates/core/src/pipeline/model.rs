//! Full model assembly and the versioned checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionFusion, TextEncoder};
use crate::diffusion::{build_schedule, LatentScale, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::networks::heads::{GatedFusion, VisionHead};
use crate::networks::temporal::{TemporalConfig, TemporalEncoder};
use crate::networks::unet::{UNet, UNetConfig};
use crate::networks::vae::{Vae, VaeConfig};
use crate::numerics::autodiff::ParamStore;
use crate::numerics::optim::Adam;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::pipeline::config::Config;

/// Every trainable component plus the shared parameter store.
pub struct Model {
    pub store: ParamStore,
    pub vae: Vae,
    pub unet: UNet,
    pub temporal: TemporalEncoder,
    pub vision_head: VisionHead,
    pub fusion: GatedFusion,
    pub text_encoder: TextEncoder,
    pub cond_fusion: ConditionFusion,
    pub sched: NoiseSchedule,
    pub scale: LatentScale,
    pub dims: usize,
    pub config: Config,
}

impl Model {
    /// Deterministic construction: identical (config, dims) produce an
    /// identical parameter layout and identical initial values.
    pub fn new(config: &Config, dims: usize) -> Result<Model> {
        config.validate()?;
        if dims == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let mut store = ParamStore::new();
        let rng = RngStream::new(config.seed, "init");
        let vae = Vae::new(
            &mut store,
            &mut rng.fork("vae"),
            VaeConfig {
                in_channels: 3,
                base_channels: config.vae_channels,
                latent_channels: config.latent_channels,
                image_size: config.image_size,
                kl_weight: config.kl_weight,
            },
        )?;
        let unet = UNet::new(
            &mut store,
            &mut rng.fork("unet"),
            UNetConfig {
                latent_channels: config.latent_channels,
                base_channels: config.unet_channels,
                d_timestep: 2 * config.unet_channels,
                d_model: config.d_model,
                heads: config.n_heads,
            },
        )?;
        let temporal = TemporalEncoder::new(
            &mut store,
            &mut rng.fork("temporal"),
            TemporalConfig {
                seq_len: config.seq_len,
                pred_len: config.pred_len,
                patch_len: config.patch_size,
                stride: config.stride,
                padding: config.padding,
                d_model: config.d_model,
                d_ff: config.d_ff,
                heads: config.n_heads,
                layers: config.e_layers,
            },
        )?;
        let vision_head = VisionHead::new(
            &mut store,
            &mut rng.fork("vision_head"),
            config.image_size,
            config.vision_head_channels,
            config.pred_len,
            dims,
        )?;
        let fusion = GatedFusion::new(&mut store, &mut rng.fork("fusion"), dims, config.d_fusion);
        let text_encoder = TextEncoder::new(&mut store, &mut rng.fork("text"), config.d_model, "text");
        let freq_dim = 2 * dims * config.seq_len;
        let cond_fusion = ConditionFusion::new(
            &mut store,
            &mut rng.fork("cond"),
            config.d_model,
            freq_dim,
            config.latent_channels,
            config.n_heads,
            config.cond_use_latent,
            "cond",
        )?;
        let sched = build_schedule(
            config.num_timesteps,
            config.beta_start,
            config.beta_end,
            ScheduleKind::parse(&config.beta_schedule)?,
        )?;
        Ok(Model {
            store,
            vae,
            unet,
            temporal,
            vision_head,
            fusion,
            text_encoder,
            cond_fusion,
            sched,
            scale: LatentScale { s: 1.0 },
            dims,
            config: config.clone(),
        })
    }

    /// Freeze (or unfreeze) the autoencoder.
    pub fn set_vae_frozen(&mut self, frozen: bool) {
        let ids: Vec<_> = self.vae.param_ids().to_vec();
        self.store.set_trainable_all(&ids, !frozen);
    }
}

const MAGIC: &[u8; 4] = b"LDTS";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: Config,
    config_hash: u64,
    dims: usize,
    latent_scale: f64,
    params: Vec<ParamMeta>,
    adam_step: Option<u64>,
}

/// Write the model (and optionally optimizer moments) to a versioned binary
/// file: magic, version, JSON header, then little-endian f64 payloads.
pub fn save_checkpoint(model: &Model, adam: Option<&Adam>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        config_hash: model.config.hash(),
        dims: model.dims,
        latent_scale: model.scale.s,
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamMeta {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        adam_step: adam.map(|a| a.step_count()),
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    let mut write_tensor = |t: &Tensor| -> Result<()> {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for (_, p) in model.store.iter() {
        write_tensor(&p.value)?;
    }
    if let Some(adam) = adam {
        let (m, v) = adam.moments();
        for t in m.iter().chain(v.iter()) {
            write_tensor(t)?;
        }
    }
    Ok(())
}

/// Rebuild a model from a checkpoint. Returns the model and, when moments
/// were saved, a restored optimizer with the stored learning rate.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<Adam>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Format(e.to_string()))?;
    if header.config_hash != header.config.hash() {
        return Err(Error::Format("config hash mismatch in checkpoint".into()));
    }
    let mut model = Model::new(&header.config, header.dims)?;
    model.scale = LatentScale {
        s: header.latent_scale,
    };
    if header.params.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::checked(shape.to_vec(), data)
    };
    for (meta, (_, p)) in header.params.iter().zip(model.store.iter_mut()) {
        if meta.name != p.name || meta.shape != p.value.shape() {
            return Err(Error::Format(format!(
                "checkpoint parameter {:?} {:?} does not match model {:?} {:?}",
                meta.name,
                meta.shape,
                p.name,
                p.value.shape()
            )));
        }
        p.value = read_tensor(&meta.shape)?;
        p.trainable = meta.trainable;
    }
    let adam = match header.adam_step {
        Some(t) => {
            let mut m = Vec::with_capacity(header.params.len());
            for meta in &header.params {
                m.push(read_tensor(&meta.shape)?);
            }
            let mut v = Vec::with_capacity(header.params.len());
            for meta in &header.params {
                v.push(read_tensor(&meta.shape)?);
            }
            let mut adam = Adam::new(header.config.learning_rate);
            adam.restore_moments(t, m, v);
            Some(adam)
        }
        None => None,
    };
    Ok((model, adam))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> Config {
        Config {
            seq_len: 24,
            pred_len: 6,
            image_size: 16,
            d_model: 16,
            d_ff: 24,
            n_heads: 4,
            d_fusion: 8,
            vae_channels: 2,
            unet_channels: 2,
            vision_head_channels: 2,
            patch_size: 8,
            stride: 4,
            padding: 4,
            label_len: 8,
            vae_images: 32,
            vae_epochs: 1,
            train_epochs: 1,
            patience: 1,
            batch_size: 4,
            ..Config::default()
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let cfg = toy_config();
        let a = Model::new(&cfg, 2).unwrap();
        let b = Model::new(&cfg, 2).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn freeze_flag_toggles_vae_parameters() {
        let cfg = toy_config();
        let mut m = Model::new(&cfg, 2).unwrap();
        m.set_vae_frozen(true);
        for &id in m.vae.param_ids() {
            assert!(!m.store.get(id).trainable);
        }
        m.set_vae_frozen(false);
        for &id in m.vae.param_ids() {
            assert!(m.store.get(id).trainable);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let cfg = toy_config();
        let mut model = Model::new(&cfg, 2).unwrap();
        let mut rng = RngStream::new(9, "ckpt");
        model.store.randomize(&mut rng, 0.1);
        model.scale = LatentScale { s: 0.37 };
        // Exercise the optimizer so moments are non-trivial.
        let mut adam = Adam::new(cfg.learning_rate);
        crate::numerics::autodiff::gradient(&mut model.store, |g, s| {
            let w = g.param(s, crate::numerics::autodiff::ParamId(0));
            let sq = g.mul(w, w);
            Ok(g.mean_all(sq))
        })
        .unwrap();
        adam.step(&mut model.store).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, Some(&adam), &path).unwrap();
        let (loaded, loaded_adam) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.scale.s, 0.37);
        assert_eq!(loaded.config, model.config);
        for ((_, pa), (_, pb)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.trainable, pb.trainable);
            for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let loaded_adam = loaded_adam.unwrap();
        assert_eq!(loaded_adam.step_count(), 1);
        let (m0, v0) = adam.moments();
        let (m1, v1) = loaded_adam.moments();
        for (a, b) in m0.iter().zip(m1).chain(v0.iter().zip(v1)) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
