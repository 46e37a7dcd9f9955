//! End-to-end orchestration: VAE pretraining, latent-scale calibration,
//! joint training with the composite loss, DDIM-based forecasting, and
//! multi-horizon evaluation.

pub mod config;
pub mod model;

use std::path::Path;
use std::time::Instant;

pub use config::{Config, LoadedConfig, Provenance};
pub use model::{load_checkpoint, save_checkpoint, Model};

use crate::conditioning::{fft_encode, generate_prompt, PromptConfig};
use crate::data::{
    compute_metrics, denormalize, instance_normalize, load_csv, make_windows, synthetic_sinusoids,
    NormStats, SeriesFrame, SplitWindows,
};
use crate::diffusion::{calibrate_scale, ddim_step, ddim_timesteps, ddpm_step};
use crate::error::{Error, Result};
use crate::numerics::autodiff::{Graph, ParamStore};
use crate::numerics::optim::Adam;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;
use crate::vision::{encode_windows, ImageTensor};

/// Component losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeLoss {
    pub l_diff: f64,
    pub l_pred: f64,
    pub l_recon: f64,
}

impl CompositeLoss {
    /// λ1·L_diff + λ2·L_pred + λ3·L_recon
    pub fn total(&self, cfg: &Config) -> f64 {
        cfg.lambda_diff * self.l_diff + cfg.lambda_pred * self.l_pred
            + cfg.lambda_recon * self.l_recon
    }
}

#[derive(Debug, Clone)]
pub enum TrainEvent {
    VaeEpoch {
        epoch: usize,
        train_loss: f64,
        val_recon_mse: f64,
    },
    Step {
        epoch: usize,
        step: usize,
        loss: CompositeLoss,
        total: f64,
    },
    EpochEnd {
        epoch: usize,
        val_mse: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_recon: Vec<f64>,
    pub best_val_recon: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub step_losses: Vec<(usize, usize, CompositeLoss, f64)>,
    pub val_mse: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    pub steps_run: usize,
}

/// Forecasts in original units plus diagnostics.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub y_hat: Tensor,
    pub y_hat_norm: Tensor,
    pub gate_mean: f64,
    pub elapsed_ms: f64,
    /// (mse, mae) against supplied targets, original units.
    pub metrics: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub average: Option<(f64, f64)>,
    pub skipped: Vec<usize>,
}

impl EvalTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mse,mae\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.horizon, r.mse, r.mae));
        }
        if let Some((mse, mae)) = self.average {
            out.push_str(&format!("avg,{mse},{mae}\n"));
        }
        out
    }

    pub fn to_console(&self) -> String {
        let mut out = String::from("horizon        mse        mae\n");
        for r in &self.rows {
            out.push_str(&format!("{:>7} {:>10.6} {:>10.6}\n", r.horizon, r.mse, r.mae));
        }
        if let Some((mse, mae)) = self.average {
            out.push_str(&format!("{:>7} {mse:>10.6} {mae:>10.6}\n", "avg"));
        }
        out
    }
}

/// Load the configured dataset: a CSV when a path is set, else the built-in
/// synthetic two-sinusoid series.
pub fn load_frame(cfg: &Config) -> Result<SeriesFrame> {
    if !cfg.data_path.is_empty() {
        let expected = if cfg.dim > 0 {
            Some(cfg.dim)
        } else {
            preset_dim(&cfg.dataset_name)
        };
        let mut frame = load_csv(Path::new(&cfg.data_path), expected)?;
        frame.frequency = cfg.frequency.clone();
        Ok(frame)
    } else if cfg.dataset_name.eq_ignore_ascii_case("synthetic") {
        Ok(synthetic_sinusoids(4000, cfg.seed, 0.05))
    } else {
        Err(Error::Config(format!(
            "dataset {:?} needs a data_path",
            cfg.dataset_name
        )))
    }
}

fn preset_dim(name: &str) -> Option<usize> {
    match name.to_ascii_lowercase().as_str() {
        "etth1" | "etth2" | "ettm1" | "ettm2" => Some(7),
        "weather" => Some(21),
        "electricity" | "ecl" => Some(321),
        "traffic" => Some(862),
        _ => None,
    }
}

/// Chronological train/val/test windows for the configured dataset.
pub fn split_frame(cfg: &Config, frame: &SeriesFrame) -> Result<[SplitWindows; 3]> {
    make_windows(
        frame,
        &cfg.split_spec(),
        cfg.seq_len,
        cfg.pred_len,
        cfg.label_len,
    )
}

/// Images for a raw window batch: instance-normalize with the norm constant,
/// then encode the three channels.
pub fn build_images(x: &Tensor, cfg: &Config) -> Result<ImageTensor> {
    let (img_norm, _) = instance_normalize(x, Some(cfg.norm_const));
    encode_windows(&img_norm, &cfg.vision_config()?)
}

fn latent_shape(model: &Model, batch: usize) -> Vec<usize> {
    let ls = model.vae.cfg.latent_size();
    vec![batch, model.config.latent_channels, ls, ls]
}

/// Pretrain the autoencoder on transformed training images with early
/// stopping on validation reconstruction error, then leave the best weights
/// in place.
pub fn pretrain_vae(
    model: &mut Model,
    train: &SplitWindows,
    val: &SplitWindows,
    out_dir: Option<&Path>,
    mut on_event: impl FnMut(TrainEvent),
) -> Result<PretrainReport> {
    let cfg = model.config.clone();
    let mut report = PretrainReport {
        best_val_recon: f64::INFINITY,
        ..Default::default()
    };
    if cfg.vae_epochs == 0 {
        return Ok(report);
    }
    let n_img = cfg.vae_images.min(train.len()).max(1);
    let picks: Vec<usize> = (0..n_img).map(|i| i * train.len() / n_img).collect();
    let images = images_for(train, &picks, &cfg)?;
    let n_val = (cfg.vae_images / 4).clamp(1, val.len());
    let val_picks: Vec<usize> = (0..n_val).map(|i| i * val.len() / n_val).collect();
    let val_images = images_for(val, &val_picks, &cfg)?;

    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = RngStream::new(cfg.seed, "vae-pretrain");
    let mut best: Option<(f64, ParamStore)> = None;
    let mut bad_epochs = 0usize;
    for epoch in 1..=cfg.vae_epochs {
        let mut order: Vec<usize> = (0..n_img).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = gather_images(&images, chunk, &cfg);
            let eps = rng.normal_tensor(latent_shape(model, chunk.len()));
            model.store.zero_grads();
            let mut g = Graph::new();
            let img = g.constant(batch);
            let (mean, logvar) = model.vae.encode(&mut g, &model.store, img)?;
            let z = model.vae.sample(&mut g, mean, logvar, &eps);
            let rec = model.vae.decode(&mut g, &model.store, z)?;
            let recon = g.mse(rec, img);
            let kl = model.vae.kl(&mut g, mean, logvar);
            let klw = g.affine(kl, cfg.kl_weight, 0.0);
            let loss = g.add(recon, klw);
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                if let (Some(dir), Some((_, best_store))) = (out_dir, &best) {
                    model.store = best_store.clone();
                    let path = dir.join("last_good.ckpt");
                    save_checkpoint(model, None, &path)?;
                    return Err(Error::Training(format!(
                        "autoencoder loss became non-finite at epoch {epoch}; last good weights in {}",
                        path.display()
                    )));
                }
                return Err(Error::Training(format!(
                    "autoencoder loss became non-finite at epoch {epoch}"
                )));
            }
            g.backward_into(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        epoch_loss /= batches.max(1) as f64;
        let val_recon = vae_val_recon(model, &val_images, &cfg)?;
        report.epoch_train_loss.push(epoch_loss);
        report.epoch_val_recon.push(val_recon);
        on_event(TrainEvent::VaeEpoch {
            epoch,
            train_loss: epoch_loss,
            val_recon_mse: val_recon,
        });
        if val_recon < report.best_val_recon {
            report.best_val_recon = val_recon;
            best = Some((val_recon, model.store.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(report)
}

fn images_for(split: &SplitWindows, picks: &[usize], cfg: &Config) -> Result<Tensor> {
    let mut planes: Vec<f64> = Vec::new();
    for chunk in picks.chunks(cfg.batch_size.max(1)) {
        let (x, _) = split.batch(chunk);
        let imgs = build_images(&x, cfg)?;
        planes.extend_from_slice(imgs.pixels().data());
    }
    Ok(Tensor::new(
        vec![picks.len(), 3, cfg.image_size, cfg.image_size],
        planes,
    ))
}

fn gather_images(images: &Tensor, picks: &[usize], cfg: &Config) -> Tensor {
    let plane = 3 * cfg.image_size * cfg.image_size;
    let mut out = Vec::with_capacity(picks.len() * plane);
    for &i in picks {
        out.extend_from_slice(&images.data()[i * plane..(i + 1) * plane]);
    }
    Tensor::new(vec![picks.len(), 3, cfg.image_size, cfg.image_size], out)
}

/// Per-pixel reconstruction MSE from the posterior mean (no sampling noise).
fn vae_val_recon(model: &Model, val_images: &Tensor, cfg: &Config) -> Result<f64> {
    let n = val_images.shape()[0];
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in (0..n).collect::<Vec<_>>().chunks(cfg.batch_size) {
        let batch = gather_images(val_images, chunk, cfg);
        let mut g = Graph::new();
        let img = g.constant(batch.clone());
        let (mean, _) = model.vae.encode(&mut g, &model.store, img)?;
        let rec = model.vae.decode(&mut g, &model.store, mean)?;
        let mse = g.mse(rec, img);
        total += g.value(mse).item() * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Encode up to `max_latents` training windows and calibrate the latent
/// scale from the pooled sample.
pub fn calibrate_model_scale(
    model: &mut Model,
    train: &SplitWindows,
    max_latents: usize,
) -> Result<f64> {
    let n = max_latents.min(train.len()).max(2);
    let picks: Vec<usize> = (0..n).map(|i| i * train.len() / n).collect();
    let latents = encode_latents(model, train, &picks)?;
    let scale = calibrate_scale(&latents)?;
    model.scale = scale;
    Ok(scale.s)
}

/// Reparameterized latent samples for the picked windows.
pub fn encode_latents(model: &Model, split: &SplitWindows, picks: &[usize]) -> Result<Vec<Tensor>> {
    let cfg = &model.config;
    let mut rng = RngStream::new(cfg.seed, "calibrate");
    let mut out = Vec::with_capacity(picks.len());
    for chunk in picks.chunks(cfg.batch_size.max(1)) {
        let (x, _) = split.batch(chunk);
        let images = build_images(&x, cfg)?;
        let eps = rng.normal_tensor(latent_shape(model, chunk.len()));
        let mut g = Graph::new();
        let img = g.constant(images.pixels().clone());
        let (mean, logvar) = model.vae.encode(&mut g, &model.store, img)?;
        let z = model.vae.sample(&mut g, mean, logvar, &eps);
        let zv = g.value(z);
        let ls = model.vae.cfg.latent_size();
        let per = cfg.latent_channels * ls * ls;
        for (bi, _) in chunk.iter().enumerate() {
            out.push(Tensor::new(
                vec![cfg.latent_channels, ls, ls],
                zv.data()[bi * per..(bi + 1) * per].to_vec(),
            ));
        }
    }
    Ok(out)
}

struct StepOutcome {
    loss: CompositeLoss,
    total: f64,
}

/// One joint optimization step over a raw (X, Y) batch.
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    noise_rng: &mut RngStream,
) -> Result<StepOutcome> {
    let cfg = model.config.clone();
    let (x_norm, stats) = instance_normalize(x, None);
    let images = build_images(x, &cfg)?;
    let prompts = generate_prompt(
        x,
        &PromptConfig {
            description: cfg.dataset_description.clone(),
            pred_len: cfg.pred_len,
            seq_len: cfg.seq_len,
        },
    );
    let c_freq_t = fft_encode(&x_norm)?.0;
    let y_norm = normalize_targets(y, &stats);

    let b = x.shape()[0];
    let eps_vae = noise_rng.normal_tensor(latent_shape(model, b));
    let t = noise_rng.uniform_usize(model.sched.steps()) + 1;
    let eps_diff = noise_rng.normal_tensor(latent_shape(model, b));

    model.store.zero_grads();
    let mut g = Graph::new();
    let img = g.constant(images.pixels().clone());
    let (mean, logvar) = model.vae.encode(&mut g, &model.store, img)?;
    let z = model.vae.sample(&mut g, mean, logvar, &eps_vae);
    let z0 = g.affine(z, model.scale.s, 0.0);

    let c_text = model.text_encoder.embed(&mut g, &model.store, &prompts)?;
    let c_freq = g.constant(c_freq_t);
    let c_m = model
        .cond_fusion
        .fuse(&mut g, &model.store, c_text, c_freq, z0)?;

    // Forward diffusion at the drawn timestep, in-graph.
    let ab = model.sched.alpha_bar(t);
    let eps_in = g.constant(eps_diff);
    let scaled_z0 = g.affine(z0, ab.sqrt(), 0.0);
    let scaled_eps = g.affine(eps_in, (1.0 - ab).sqrt(), 0.0);
    let z_t = g.add(scaled_z0, scaled_eps);
    let eps_hat = model
        .unet
        .predict_noise(&mut g, &model.store, z_t, t, c_m)?;
    let l_diff = g.mse(eps_hat, eps_in);

    // Single-shot inversion feeds the prediction branch.
    let eps_term = g.affine(eps_hat, (1.0 - ab).sqrt(), 0.0);
    let numer = g.sub(z_t, eps_term);
    let z0_hat = g.affine(numer, 1.0 / ab.sqrt(), 0.0);
    let z_dec = g.affine(z0_hat, 1.0 / model.scale.s, 0.0);
    let i_rec = model.vae.decode(&mut g, &model.store, z_dec)?;
    let z_ve = model.vision_head.forward(&mut g, &model.store, i_rec)?;
    let x_norm_in = g.constant(x_norm);
    let z_te = model.temporal.forward(&mut g, &model.store, x_norm_in)?;
    let (y_hat_norm, _gate) = model
        .fusion
        .forward(&mut g, &model.store, z_te, z_ve, None)?;
    let y_target = g.constant(y_norm);
    let l_pred = g.mse(y_hat_norm, y_target);
    let l_recon = g.mse(i_rec, img);

    let mut total = g.affine(l_diff, cfg.lambda_diff, 0.0);
    let wp = g.affine(l_pred, cfg.lambda_pred, 0.0);
    total = g.add(total, wp);
    if cfg.lambda_recon != 0.0 {
        let wr = g.affine(l_recon, cfg.lambda_recon, 0.0);
        total = g.add(total, wr);
    }
    let loss = CompositeLoss {
        l_diff: g.value(l_diff).item(),
        l_pred: g.value(l_pred).item(),
        l_recon: g.value(l_recon).item(),
    };
    let total_value = loss.total(&cfg);
    if !total_value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss: l_diff={} l_pred={} l_recon={}",
            loss.l_diff, loss.l_pred, loss.l_recon
        )));
    }
    g.backward_into(total, &mut model.store)?;
    adam.step(&mut model.store)?;
    Ok(StepOutcome {
        loss,
        total: total_value,
    })
}

fn normalize_targets(y: &Tensor, stats: &NormStats) -> Tensor {
    let s = y.shape();
    let (b, h, d) = (s[0], s[1], s[2]);
    let means = stats.means.data();
    let stds = stats.stdev.data();
    let mut out = vec![0.0; b * h * d];
    for bi in 0..b {
        for hi in 0..h {
            for di in 0..d {
                let i = (bi * h + hi) * d + di;
                out[i] = (y.data()[i] - means[bi * d + di]) / stds[bi * d + di];
            }
        }
    }
    Tensor::new(vec![b, h, d], out)
}

/// Joint training per the composite objective with early stopping on
/// validation MSE. The VAE is frozen beforehand when `freeze_ldm` is set.
pub fn train(
    model: &mut Model,
    train_split: &SplitWindows,
    val_split: &SplitWindows,
    mut on_event: impl FnMut(TrainEvent),
) -> Result<TrainReport> {
    let cfg = model.config.clone();
    if cfg.freeze_ldm {
        model.set_vae_frozen(true);
    }
    let mut adam = Adam::new(cfg.learning_rate);
    let shuffle_rng = RngStream::new(cfg.seed, "train-shuffle");
    let mut noise_rng = RngStream::new(cfg.seed, "train-noise");
    let mut report = TrainReport {
        best_val_mse: f64::INFINITY,
        ..Default::default()
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut bad_epochs = 0usize;
    let mut steps = 0usize;
    'epochs: for epoch in 1..=cfg.train_epochs {
        let batches = {
            let mut rng = shuffle_rng.fork(&format!("epoch-{epoch}"));
            train_split.shuffled_batches(cfg.batch_size, &mut rng)
        };
        for (bi, picks) in batches.iter().enumerate() {
            let (x, y) = train_split.batch(picks);
            let out = train_step(model, &mut adam, &x, &y, &mut noise_rng).map_err(|e| match e {
                Error::Training(msg) => Error::Training(format!("epoch {epoch} batch {bi}: {msg}")),
                other => other,
            })?;
            steps += 1;
            report.step_losses.push((epoch, steps, out.loss, out.total));
            on_event(TrainEvent::Step {
                epoch,
                step: steps,
                loss: out.loss,
                total: out.total,
            });
            if cfg.max_steps > 0 && steps >= cfg.max_steps {
                break 'epochs;
            }
        }
        let val_mse = evaluate_split(model, val_split, Some(epoch))?.0;
        report.val_mse.push(val_mse);
        on_event(TrainEvent::EpochEnd { epoch, val_mse });
        if val_mse < report.best_val_mse {
            report.best_val_mse = val_mse;
            report.best_epoch = Some(epoch);
            best = Some((val_mse, model.store.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    report.steps_run = steps;
    Ok(report)
}

/// Forecast a raw look-back batch. Deterministic for a fixed model seed.
pub fn forecast(model: &Model, x: &Tensor, targets: Option<&Tensor>) -> Result<ForecastResult> {
    let mut rng = RngStream::new(model.config.seed, "forecast");
    forecast_with_rng(model, x, targets, None, &mut rng)
}

/// Forecast with an explicit noise stream and optional gate override.
pub fn forecast_with_rng(
    model: &Model,
    x: &Tensor,
    targets: Option<&Tensor>,
    gate_override: Option<f64>,
    rng: &mut RngStream,
) -> Result<ForecastResult> {
    let cfg = &model.config;
    let s = x.shape();
    if s.len() != 3 || s[1] != cfg.seq_len || s[2] != model.dims {
        return Err(Error::Validation(format!(
            "forecast input must be B×{}×{}, got {s:?}",
            cfg.seq_len, model.dims
        )));
    }
    let started = Instant::now();
    let b = s[0];
    let (x_norm, stats) = instance_normalize(x, None);
    let images = build_images(x, cfg)?;
    let prompts = generate_prompt(
        x,
        &PromptConfig {
            description: cfg.dataset_description.clone(),
            pred_len: cfg.pred_len,
            seq_len: cfg.seq_len,
        },
    );
    let c_freq_t = fft_encode(&x_norm)?.0;

    // Conditioning (forward only): z = s·E(I) from the look-back image.
    let c_m_value = {
        let mut g = Graph::new();
        let img = g.constant(images.pixels().clone());
        let (mean, logvar) = model.vae.encode(&mut g, &model.store, img)?;
        let eps = rng.normal_tensor(latent_shape(model, b));
        let z = model.vae.sample(&mut g, mean, logvar, &eps);
        let z0 = g.affine(z, model.scale.s, 0.0);
        let c_text = model.text_encoder.embed(&mut g, &model.store, &prompts)?;
        let c_freq = g.constant(c_freq_t);
        let c_m = model
            .cond_fusion
            .fuse(&mut g, &model.store, c_text, c_freq, z0)?;
        g.value(c_m).clone()
    };

    // Reverse diffusion from pure noise under the fused condition.
    let predictor = |z_t: &Tensor, t: usize| -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let c = g.constant(c_m_value.clone());
        let eps = model.unet.predict_noise(&mut g, &model.store, z, t, c)?;
        Ok(g.value(eps).clone())
    };
    let mut z = rng.normal_tensor(latent_shape(model, b));
    if cfg.use_ddim {
        let ts = ddim_timesteps(model.sched.steps(), cfg.inference_steps)?;
        for pair in ts.windows(2) {
            let eps_hat = predictor(&z, pair[0])?;
            z = ddim_step(&z, pair[0], pair[1], &eps_hat, &model.sched)?;
        }
    } else {
        for t in (1..=model.sched.steps()).rev() {
            let eps_hat = predictor(&z, t)?;
            z = ddpm_step(&z, t, &eps_hat, &model.sched, rng)?;
        }
    }

    // Decode, project both branches, fuse, denormalize.
    let (y_hat_norm, gate_mean) = {
        let mut g = Graph::new();
        let zv = g.constant(z.scale(1.0 / model.scale.s));
        let i_rec = model.vae.decode(&mut g, &model.store, zv)?;
        let z_ve = model.vision_head.forward(&mut g, &model.store, i_rec)?;
        let xn = g.constant(x_norm);
        let z_te = model.temporal.forward(&mut g, &model.store, xn)?;
        let (y_hat, gate) = model
            .fusion
            .forward(&mut g, &model.store, z_te, z_ve, gate_override)?;
        (g.value(y_hat).clone(), g.value(gate).mean())
    };
    let y_hat = denormalize(&y_hat_norm, &stats);
    let metrics = match targets {
        Some(y) => Some(compute_metrics(y, &y_hat)?),
        None => None,
    };
    Ok(ForecastResult {
        y_hat,
        y_hat_norm,
        gate_mean,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        metrics,
    })
}

/// Original-units (MSE, MAE) of the model over one split.
pub fn evaluate_split(
    model: &Model,
    split: &SplitWindows,
    epoch: Option<usize>,
) -> Result<(f64, f64)> {
    let cfg = &model.config;
    let label = match epoch {
        Some(e) => format!("val-epoch-{e}"),
        None => "eval".to_string(),
    };
    let base = RngStream::new(cfg.seed, &label);
    let mut se_total = 0.0;
    let mut ae_total = 0.0;
    let mut n_total = 0usize;
    for (bi, picks) in split.index_batches(cfg.batch_size).iter().enumerate() {
        let (x, y) = split.batch(picks);
        let mut rng = base.fork(&format!("batch-{bi}"));
        let result = forecast_with_rng(model, &x, Some(&y), None, &mut rng)?;
        let (mse, mae) = result.metrics.expect("targets supplied");
        let n = y.len();
        se_total += mse * n as f64;
        ae_total += mae * n as f64;
        n_total += n;
    }
    Ok((se_total / n_total as f64, ae_total / n_total as f64))
}

/// Repeat the final look-back value across the horizon.
pub fn naive_repeat_metrics(split: &SplitWindows) -> Result<(f64, f64)> {
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    for picks in split.index_batches(256) {
        let (x, y) = split.batch(&picks);
        let s = y.shape();
        let (b, h, d) = (s[0], s[1], s[2]);
        let l = x.shape()[1];
        for bi in 0..b {
            for di in 0..d {
                let last = x.at(&[bi, l - 1, di]);
                for hi in 0..h {
                    let e = last - y.at(&[bi, hi, di]);
                    se += e * e;
                    ae += e.abs();
                }
            }
        }
        n += b * h * d;
    }
    Ok((se / n as f64, ae / n as f64))
}

/// MSE/MAE per standard horizon that fits within the trained prediction
/// length (prefix truncation), plus the model's own horizon and the average
/// row. Longer horizons are skipped.
pub fn evaluate(model: &Model, test: &SplitWindows) -> Result<EvalTable> {
    let cfg = &model.config;
    let mut horizons: Vec<usize> = [96usize, 192, 336, 720]
        .into_iter()
        .filter(|&h| h <= cfg.pred_len)
        .collect();
    if !horizons.contains(&cfg.pred_len) {
        horizons.push(cfg.pred_len);
    }
    horizons.sort_unstable();
    let skipped: Vec<usize> = [96usize, 192, 336, 720]
        .into_iter()
        .filter(|&h| h > cfg.pred_len)
        .collect();

    let base = RngStream::new(cfg.seed, "eval");
    let mut se = vec![0.0; horizons.len()];
    let mut ae = vec![0.0; horizons.len()];
    let mut count = vec![0usize; horizons.len()];
    for (bi, picks) in test.index_batches(cfg.batch_size).iter().enumerate() {
        let (x, y) = test.batch(picks);
        let mut rng = base.fork(&format!("batch-{bi}"));
        let result = forecast_with_rng(model, &x, None, None, &mut rng)?;
        let s = y.shape();
        let (b, _h, d) = (s[0], s[1], s[2]);
        for (hi_idx, &hz) in horizons.iter().enumerate() {
            for bb in 0..b {
                for t in 0..hz {
                    for di in 0..d {
                        let e = result.y_hat.at(&[bb, t, di]) - y.at(&[bb, t, di]);
                        se[hi_idx] += e * e;
                        ae[hi_idx] += e.abs();
                    }
                }
            }
            count[hi_idx] += b * hz * d;
        }
    }
    let rows: Vec<EvalRow> = horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| EvalRow {
            horizon: h,
            mse: se[i] / count[i] as f64,
            mae: ae[i] / count[i] as f64,
        })
        .collect();
    let average = if rows.is_empty() {
        None
    } else {
        Some((
            rows.iter().map(|r| r.mse).sum::<f64>() / rows.len() as f64,
            rows.iter().map(|r| r.mae).sum::<f64>() / rows.len() as f64,
        ))
    };
    Ok(EvalTable {
        rows,
        average,
        skipped,
    })
}
