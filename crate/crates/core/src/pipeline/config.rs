//! Run configuration: a flat key set with file loading, dotted-key command
//! line overrides, provenance tracking, and a stable hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::numerics::rng::fnv1a;
use crate::vision::{RpVariant, VisionConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    // Dataset
    pub dataset_name: String,
    pub data_path: String,
    pub dataset_description: String,
    /// Expected feature count; 0 infers from the file.
    pub dim: usize,
    pub frequency: String,
    /// Natural cycle length; 0 selects the dataset preset (default 24).
    pub periodicity: usize,
    pub seq_len: usize,
    pub label_len: usize,
    pub pred_len: usize,
    pub few_shot_fraction: f64,
    pub norm_const: f64,

    // Vision representation
    pub image_size: usize,
    pub patch_size: usize,
    pub grayscale: bool,
    pub rp_variant: String,
    pub rp_embed: usize,
    pub rp_delay: usize,
    pub save_images: bool,

    // Diffusion process
    pub num_timesteps: usize,
    pub inference_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_schedule: String,
    pub use_ddim: bool,
    pub unet_layers: usize,

    // Architecture
    pub d_model: usize,
    pub d_ldm: usize,
    pub d_fusion: usize,
    pub e_layers: usize,
    pub d_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub stride: usize,
    pub padding: usize,
    pub latent_channels: usize,
    pub vae_channels: usize,
    pub unet_channels: usize,
    pub vision_head_channels: usize,
    pub cond_use_latent: bool,

    // Training
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_epochs: usize,
    pub patience: usize,
    pub loss: String,
    pub lambda_diff: f64,
    pub lambda_pred: f64,
    pub lambda_recon: f64,
    pub freeze_ldm: bool,
    pub vae_epochs: usize,
    pub vae_images: usize,
    pub kl_weight: f64,
    /// 0 means no step cap.
    pub max_steps: usize,
    pub output_type: String,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            dataset_name: "synthetic".into(),
            data_path: String::new(),
            dataset_description: "multivariate time series".into(),
            dim: 0,
            frequency: "1h".into(),
            periodicity: 0,
            seq_len: 96,
            label_len: 48,
            pred_len: 96,
            few_shot_fraction: 1.0,
            norm_const: 0.4,
            image_size: 64,
            patch_size: 16,
            grayscale: true,
            rp_variant: "gaussian".into(),
            rp_embed: 1,
            rp_delay: 1,
            save_images: false,
            num_timesteps: 300,
            inference_steps: 50,
            beta_start: 0.00085,
            beta_end: 0.012,
            beta_schedule: "scaled_linear".into(),
            use_ddim: true,
            unet_layers: 1,
            d_model: 256,
            d_ldm: 256,
            d_fusion: 256,
            e_layers: 2,
            d_layers: 1,
            d_ff: 768,
            n_heads: 8,
            stride: 8,
            padding: 8,
            latent_channels: 4,
            vae_channels: 8,
            unet_channels: 32,
            vision_head_channels: 8,
            cond_use_latent: true,
            batch_size: 32,
            learning_rate: 0.001,
            train_epochs: 10,
            patience: 3,
            loss: "MSE".into(),
            lambda_diff: 1.0,
            lambda_pred: 1.0,
            lambda_recon: 0.0,
            freeze_ldm: true,
            vae_epochs: 3,
            vae_images: 512,
            kl_weight: 1e-6,
            max_steps: 0,
            output_type: "full".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Override,
}

impl Provenance {
    fn label(&self) -> &'static str {
        match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Override => "override",
        }
    }
}

/// A validated configuration plus where each value came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    provenance: BTreeMap<String, Provenance>,
}

impl LoadedConfig {
    /// Merge defaults, an optional JSON file, and `key=value` overrides.
    /// Unknown keys from either source are rejected.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<LoadedConfig> {
        let defaults = serde_json::to_value(Config::default())
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut merged = match defaults {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let mut provenance: BTreeMap<String, Provenance> = merged
            .keys()
            .map(|k| (k.clone(), Provenance::Default))
            .collect();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config file {}: {e}", path.display()))
            })?;
            let file_val: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let obj = file_val
                .as_object()
                .ok_or_else(|| Error::Config(format!("{}: not a JSON object", path.display())))?;
            for (k, v) in obj {
                if !merged.contains_key(k) {
                    return Err(Error::Config(format!(
                        "{}: unknown key {k:?}",
                        path.display()
                    )));
                }
                merged.insert(k.clone(), v.clone());
                provenance.insert(k.clone(), Provenance::File);
            }
        }
        for (k, raw) in overrides {
            let slot = merged.get(k).cloned().ok_or_else(|| {
                Error::Config(format!("unknown override key {k:?}"))
            })?;
            let parsed = parse_override(&slot, raw)
                .ok_or_else(|| Error::Config(format!("cannot parse {raw:?} for key {k:?}")))?;
            merged.insert(k.clone(), parsed);
            provenance.insert(k.clone(), Provenance::Override);
        }
        let config: Config = serde_json::from_value(serde_json::Value::Object(merged))
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(LoadedConfig { config, provenance })
    }

    pub fn provenance_of(&self, key: &str) -> Option<Provenance> {
        self.provenance.get(key).copied()
    }

    /// Every effective value with its provenance, one line per key.
    pub fn echo(&self) -> String {
        let value = serde_json::to_value(&self.config).expect("config serializes");
        let obj = value.as_object().expect("config is an object");
        let mut out = String::new();
        for (k, v) in obj {
            let prov = self.provenance.get(k).copied().unwrap_or(Provenance::Default);
            out.push_str(&format!("{k} = {v}  [{}]\n", prov.label()));
        }
        out
    }
}

fn parse_override(template: &serde_json::Value, raw: &str) -> Option<serde_json::Value> {
    match template {
        serde_json::Value::String(_) => Some(serde_json::Value::String(raw.to_string())),
        serde_json::Value::Bool(_) => raw.parse::<bool>().ok().map(serde_json::Value::Bool),
        serde_json::Value::Number(n) => {
            if n.is_u64() {
                raw.parse::<u64>().ok().map(|v| serde_json::json!(v))
            } else {
                raw.parse::<f64>().ok().map(|v| serde_json::json!(v))
            }
        }
        _ => serde_json::from_str(raw).ok(),
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.seq_len == 0 || self.pred_len == 0 {
            return fail("seq_len and pred_len must be positive".into());
        }
        if self.label_len > self.seq_len {
            return fail(format!(
                "label_len {} exceeds seq_len {}",
                self.label_len, self.seq_len
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.patience > self.train_epochs && self.max_steps == 0 {
            return fail(format!(
                "patience {} exceeds train_epochs {}",
                self.patience, self.train_epochs
            ));
        }
        if !(self.few_shot_fraction > 0.0 && self.few_shot_fraction <= 1.0) {
            return fail(format!(
                "few_shot_fraction must be in (0, 1], got {}",
                self.few_shot_fraction
            ));
        }
        if self.loss != "MSE" {
            return fail(format!("unsupported loss {:?}", self.loss));
        }
        if self.unet_layers != 1 {
            return fail(format!(
                "this build supports exactly one U-Net resolution level, got {}",
                self.unet_layers
            ));
        }
        if self.lambda_diff < 0.0 || self.lambda_pred < 0.0 || self.lambda_recon < 0.0 {
            return fail("loss weights must be nonnegative".into());
        }
        if self.image_size % 8 != 0 || self.image_size == 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.inference_steps == 0 || self.inference_steps > self.num_timesteps {
            return fail(format!(
                "inference_steps {} must be in 1..={}",
                self.inference_steps, self.num_timesteps
            ));
        }
        crate::diffusion::ScheduleKind::parse(&self.beta_schedule)?;
        self.rp_variant_parsed()?;
        Ok(())
    }

    pub fn rp_variant_parsed(&self) -> Result<RpVariant> {
        match self.rp_variant.as_str() {
            "gaussian" => Ok(RpVariant::Gaussian),
            "heaviside" => Ok(RpVariant::Heaviside),
            other => Err(Error::Config(format!("unknown rp_variant {other:?}"))),
        }
    }

    /// Benchmark split preset when the dataset name is known; otherwise the
    /// strict 70/10/20 chronological split.
    pub fn split_spec(&self) -> SplitSpec {
        let mut spec = SplitSpec::preset(&self.dataset_name).unwrap_or_default();
        spec.few_shot_fraction = self.few_shot_fraction;
        spec
    }

    /// Configured periodicity, falling back to the dataset preset.
    pub fn effective_periodicity(&self) -> usize {
        if self.periodicity != 0 {
            return self.periodicity;
        }
        match self.dataset_name.to_ascii_lowercase().as_str() {
            "ettm1" | "ettm2" => 96,
            "weather" => 144,
            _ => 24,
        }
    }

    pub fn vision_config(&self) -> Result<VisionConfig> {
        Ok(VisionConfig {
            period: self.effective_periodicity(),
            image_h: self.image_size,
            image_w: self.image_size,
            epsilon: crate::vision::MINMAX_EPS,
            rp_variant: self.rp_variant_parsed()?,
            rp_embed: self.rp_embed,
            rp_delay: self.rp_delay,
            rp_threshold: None,
        })
    }

    /// FNV-1a over the canonical JSON encoding (sorted keys).
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(&serde_json::to_value(self).expect("serializes"))
            .expect("encodes");
        fnv1a(text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_table() {
        let c = Config::default();
        assert_eq!(c.num_timesteps, 300);
        assert_eq!(c.inference_steps, 50);
        assert_eq!(c.beta_start, 0.00085);
        assert_eq!(c.beta_end, 0.012);
        assert_eq!(c.d_model, 256);
        assert_eq!(c.d_ldm, 256);
        assert_eq!(c.d_fusion, 256);
        assert_eq!(c.image_size, 64);
        assert_eq!(c.patch_size, 16);
        assert_eq!(c.stride, 8);
        assert_eq!(c.padding, 8);
        assert_eq!(c.seq_len, 96);
        assert_eq!(c.label_len, 48);
        assert_eq!(c.pred_len, 96);
        assert_eq!(c.norm_const, 0.4);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.train_epochs, 10);
        assert_eq!(c.patience, 3);
        assert_eq!(c.e_layers, 2);
        assert_eq!(c.d_layers, 1);
        assert_eq!(c.d_ff, 768);
        assert_eq!(c.n_heads, 8);
        assert!(c.use_ddim);
        assert!(c.freeze_ldm);
        assert!(!c.save_images);
        assert_eq!(c.loss, "MSE");
        assert_eq!(c.output_type, "full");
        assert_eq!(c.unet_layers, 1);
        c.validate().unwrap();
    }

    #[test]
    fn file_and_override_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seq_len": 48, "d_model": 128}"#).unwrap();
        let loaded = LoadedConfig::load(
            Some(&path),
            &[("pred_len".to_string(), "24".to_string())],
        )
        .unwrap();
        assert_eq!(loaded.config.seq_len, 48);
        assert_eq!(loaded.config.d_model, 128);
        assert_eq!(loaded.config.pred_len, 24);
        assert_eq!(loaded.provenance_of("seq_len"), Some(Provenance::File));
        assert_eq!(loaded.provenance_of("pred_len"), Some(Provenance::Override));
        assert_eq!(loaded.provenance_of("batch_size"), Some(Provenance::Default));
        let echo = loaded.echo();
        assert!(echo.contains("seq_len = 48  [file]"));
        assert!(echo.contains("pred_len = 24  [override]"));
        assert!(echo.contains("batch_size = 32  [default]"));
        // Echo is total: every key appears.
        let keys = serde_json::to_value(Config::default()).unwrap();
        for k in keys.as_object().unwrap().keys() {
            assert!(echo.contains(&format!("{k} = ")), "missing {k}");
        }
    }

    #[test]
    fn echo_is_reproducible() {
        let a = LoadedConfig::load(None, &[]).unwrap();
        let b = LoadedConfig::load(None, &[]).unwrap();
        assert_eq!(a.echo(), b.echo());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"sequence_length": 48}"#).unwrap();
        assert!(matches!(
            LoadedConfig::load(Some(&path), &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            LoadedConfig::load(None, &[("nope".to_string(), "1".to_string())]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_values_fail_validation() {
        let cases = [
            ("batch_size", "0"),
            ("few_shot_fraction", "1.5"),
            ("loss", "MAE"),
            ("beta_schedule", "cosine"),
            ("image_size", "63"),
            ("n_heads", "7"),
            ("inference_steps", "0"),
        ];
        for (k, v) in cases {
            let res = LoadedConfig::load(None, &[(k.to_string(), v.to_string())]);
            assert!(res.is_err(), "{k}={v} should fail");
        }
    }

    #[test]
    fn hash_is_stable_and_value_sensitive() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.hash(), b.hash());
        b.seq_len = 97;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn periodicity_presets() {
        let mut c = Config::default();
        c.dataset_name = "ETTm1".into();
        assert_eq!(c.effective_periodicity(), 96);
        c.dataset_name = "weather".into();
        assert_eq!(c.effective_periodicity(), 144);
        c.dataset_name = "etth1".into();
        assert_eq!(c.effective_periodicity(), 24);
        c.periodicity = 7;
        assert_eq!(c.effective_periodicity(), 7);
    }
}
