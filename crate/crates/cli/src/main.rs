//! Command-line entry point wiring configs to the pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error. Unknown
//! flags exit 2 via the argument parser.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ldm4ts::data::load_csv;
use ldm4ts::error::Error;
use ldm4ts::pipeline::{
    self, load_checkpoint, save_checkpoint, Config, LoadedConfig, TrainEvent,
};
use ldm4ts::vision::{encode_windows, export_png};
use ldm4ts::Tensor;

#[derive(Parser)]
#[command(name = "ldm4ts", version, about = "Time series forecasting with image encodings and latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file (flat keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set seq_len=48 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed (shorthand for --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Look-back length (shorthand for --set seq_len=N).
    #[arg(long = "seq-len")]
    seq_len: Option<usize>,
    /// Prediction length (shorthand for --set pred_len=N).
    #[arg(long = "pred-len")]
    pred_len: Option<usize>,
    /// Segmentation period (shorthand for --set periodicity=N).
    #[arg(long)]
    period: Option<usize>,
    /// Sampler: ddim or ddpm.
    #[arg(long)]
    sampler: Option<String>,
    /// Inference steps (shorthand for --set inference_steps=N).
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn load(&self, input: Option<&Path>) -> Result<LoadedConfig, Error> {
        let mut overrides: Vec<(String, String)> = Vec::new();
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        if let Some(v) = self.seq_len {
            overrides.push(("seq_len".into(), v.to_string()));
        }
        if let Some(v) = self.pred_len {
            overrides.push(("pred_len".into(), v.to_string()));
        }
        if let Some(v) = self.period {
            overrides.push(("periodicity".into(), v.to_string()));
        }
        if let Some(s) = &self.sampler {
            let use_ddim = match s.as_str() {
                "ddim" => true,
                "ddpm" => false,
                other => {
                    return Err(Error::Config(format!("unknown sampler {other:?}")));
                }
            };
            overrides.push(("use_ddim".into(), use_ddim.to_string()));
        }
        if let Some(v) = self.steps {
            overrides.push(("inference_steps".into(), v.to_string()));
        }
        if let Some(path) = input {
            overrides.push(("data_path".into(), path.display().to_string()));
        }
        LoadedConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode windows of a CSV as three-channel PNGs plus an index CSV.
    Transform {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input CSV (date column plus numeric features).
        #[arg(long)]
        input: PathBuf,
        /// Output directory for PNGs and index.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the autoencoder, calibrate the latent scale, and train the
    /// forecaster; writes a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input CSV; omit to use the built-in synthetic dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast the final look-back window(s) of a CSV.
    Forecast {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output CSV (index,step,feature,value).
        #[arg(long)]
        out: PathBuf,
        /// Number of trailing windows to forecast.
        #[arg(long, default_value_t = 1)]
        windows: usize,
    },
    /// Evaluate a checkpoint on the test split of a CSV.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Metrics CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recalibrate the latent scale on a dataset and print s.
    CalibrateScale {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    if let Ok(var) = std::env::var("LDM4TS_NUM_WORKERS") {
        match var.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = ldm4ts::par::set_worker_threads(n) {
                    eprintln!("warning: could not set worker threads: {e}");
                }
            }
            _ => eprintln!("warning: ignoring invalid LDM4TS_NUM_WORKERS={var:?}"),
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Transform { cfg, input, out } => transform(&cfg, &input, &out),
        Command::Train { cfg, input, out } => train(&cfg, input.as_deref(), &out),
        Command::Forecast {
            cfg,
            checkpoint,
            input,
            out,
            windows,
        } => forecast(&cfg, &checkpoint, &input, &out, windows),
        Command::Eval {
            cfg,
            checkpoint,
            input,
            out,
        } => eval(&cfg, &checkpoint, input.as_deref(), &out),
        Command::CalibrateScale {
            cfg,
            checkpoint,
            input,
        } => calibrate(&cfg, &checkpoint, input.as_deref()),
    }
}

fn echo(loaded: &LoadedConfig) {
    print!("{}", loaded.echo());
}

fn transform(args: &ConfigArgs, input: &Path, out: &Path) -> Result<(), Error> {
    let loaded = args.load(Some(input))?;
    echo(&loaded);
    let cfg = &loaded.config;
    let frame = load_csv(input, if cfg.dim > 0 { Some(cfg.dim) } else { None })?;
    if frame.rows() < cfg.seq_len {
        return Err(Error::Config(format!(
            "file has {} rows, need at least seq_len = {}",
            frame.rows(),
            cfg.seq_len
        )));
    }
    let n_windows = frame.rows() - cfg.seq_len + 1;
    let vision_cfg = cfg.vision_config()?;
    std::fs::create_dir_all(out)?;
    let mut index = String::from("index,origin,rgb,seg,gaf,rp\n");
    let d = frame.dims();
    for start in (0..n_windows).step_by(cfg.batch_size.max(1)) {
        let stop = (start + cfg.batch_size).min(n_windows);
        let b = stop - start;
        let mut x = vec![0.0; b * cfg.seq_len * d];
        for bi in 0..b {
            for t in 0..cfg.seq_len {
                for di in 0..d {
                    x[(bi * cfg.seq_len + t) * d + di] = frame.values.at(&[start + bi + t, di]);
                }
            }
        }
        let x = Tensor::new(vec![b, cfg.seq_len, d], x);
        let (img_norm, _) = ldm4ts::data::instance_normalize(&x, Some(cfg.norm_const));
        let images = encode_windows(&img_norm, &vision_cfg)?;
        let paths = export_png(&images, out, "window", start)?;
        for bi in 0..b {
            let names: Vec<String> = paths[bi * 4..(bi + 1) * 4]
                .iter()
                .map(|p| p.file_name().unwrap().to_string_lossy().to_string())
                .collect();
            index.push_str(&format!(
                "{},{},{},{},{},{}\n",
                start + bi,
                start + bi,
                names[0],
                names[1],
                names[2],
                names[3]
            ));
        }
    }
    std::fs::write(out.join("index.csv"), index)?;
    println!("wrote {n_windows} windows to {}", out.display());
    Ok(())
}

fn print_event(ev: &TrainEvent) {
    match ev {
        TrainEvent::VaeEpoch {
            epoch,
            train_loss,
            val_recon_mse,
        } => println!("vae_epoch={epoch} train_loss={train_loss:.6} val_recon_mse={val_recon_mse:.6}"),
        TrainEvent::Step {
            epoch,
            step,
            loss,
            total,
        } => println!(
            "epoch={epoch} step={step} l_diff={:.6} l_pred={:.6} l_recon={:.6} total={total:.6}",
            loss.l_diff, loss.l_pred, loss.l_recon
        ),
        TrainEvent::EpochEnd { epoch, val_mse } => {
            println!("epoch={epoch} val_mse={val_mse:.6}")
        }
    }
}

fn train(args: &ConfigArgs, input: Option<&Path>, out: &Path) -> Result<(), Error> {
    let loaded = args.load(input)?;
    echo(&loaded);
    let cfg = &loaded.config;
    let frame = pipeline::load_frame(cfg)?;
    let [train_w, val_w, test_w] = pipeline::split_frame(cfg, &frame)?;
    println!(
        "windows: train={} val={} test={}",
        train_w.len(),
        val_w.len(),
        test_w.len()
    );
    let mut model = pipeline::Model::new(cfg, frame.dims())?;
    std::fs::create_dir_all(out)?;
    let mut log_lines = String::from("kind,epoch,step,l_diff,l_pred,l_recon,total,val\n");
    {
        let log = &mut log_lines;
        pipeline::pretrain_vae(&mut model, &train_w, &val_w, Some(out), |ev| {
            print_event(&ev);
            if let TrainEvent::VaeEpoch {
                epoch,
                train_loss,
                val_recon_mse,
            } = ev
            {
                log.push_str(&format!("vae,{epoch},,,,,{train_loss},{val_recon_mse}\n"));
            }
        })?;
    }
    let s = pipeline::calibrate_model_scale(&mut model, &train_w, 1024)?;
    println!("latent_scale={s:.6}");
    {
        let log = &mut log_lines;
        pipeline::train(&mut model, &train_w, &val_w, |ev| {
            print_event(&ev);
            match ev {
                TrainEvent::Step {
                    epoch,
                    step,
                    loss,
                    total,
                } => log.push_str(&format!(
                    "step,{epoch},{step},{},{},{},{total},\n",
                    loss.l_diff, loss.l_pred, loss.l_recon
                )),
                TrainEvent::EpochEnd { epoch, val_mse } => {
                    log.push_str(&format!("val,{epoch},,,,,,{val_mse}\n"))
                }
                TrainEvent::VaeEpoch { .. } => {}
            }
        })?;
    }
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&model, None, &ckpt)?;
    std::fs::write(out.join("train_log.csv"), log_lines)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn forecast(
    args: &ConfigArgs,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    windows: usize,
) -> Result<(), Error> {
    let loaded = args.load(Some(input))?;
    echo(&loaded);
    let (mut model, _) = load_checkpoint(checkpoint)?;
    apply_runtime_overrides(args, &mut model.config)?;
    let frame = load_csv(input, Some(model.dims))?;
    let l = model.config.seq_len;
    if frame.rows() < l {
        return Err(Error::Config(format!(
            "file has {} rows, need at least seq_len = {l}",
            frame.rows()
        )));
    }
    let n = windows.max(1).min(frame.rows() - l + 1);
    let d = frame.dims();
    let mut x = vec![0.0; n * l * d];
    let first_origin = frame.rows() - l - (n - 1);
    for bi in 0..n {
        for t in 0..l {
            for di in 0..d {
                x[(bi * l + t) * d + di] = frame.values.at(&[first_origin + bi + t, di]);
            }
        }
    }
    let x = Tensor::new(vec![n, l, d], x);
    let result = pipeline::forecast(&model, &x, None)?;
    let mut csv = String::from("index,step,feature,value\n");
    for bi in 0..n {
        for t in 0..model.config.pred_len {
            for di in 0..d {
                csv.push_str(&format!(
                    "{bi},{},{},{}\n",
                    t + 1,
                    frame.feature_names[di],
                    result.y_hat.at(&[bi, t, di])
                ));
            }
        }
    }
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, csv)?;
    println!(
        "forecast written to {} (gate_mean={:.4}, {:.1} ms)",
        out.display(),
        result.gate_mean,
        result.elapsed_ms
    );
    Ok(())
}

/// Keys that may differ from the checkpointed config at inference time.
fn apply_runtime_overrides(args: &ConfigArgs, cfg: &mut Config) -> Result<(), Error> {
    if let Some(s) = &args.sampler {
        cfg.use_ddim = match s.as_str() {
            "ddim" => true,
            "ddpm" => false,
            other => return Err(Error::Config(format!("unknown sampler {other:?}"))),
        };
    }
    if let Some(steps) = args.steps {
        cfg.inference_steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()
}

fn eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    input: Option<&Path>,
    out: &Path,
) -> Result<(), Error> {
    let loaded = args.load(input)?;
    echo(&loaded);
    let (mut model, _) = load_checkpoint(checkpoint)?;
    apply_runtime_overrides(args, &mut model.config)?;
    let mut data_cfg = model.config.clone();
    data_cfg.data_path = loaded.config.data_path.clone();
    data_cfg.dataset_name = loaded.config.dataset_name.clone();
    data_cfg.seed = model.config.seed;
    let frame = pipeline::load_frame(&data_cfg)?;
    let [_, _, test_w] = pipeline::split_frame(&data_cfg, &frame)?;
    let table = pipeline::evaluate(&model, &test_w)?;
    for &h in &table.skipped {
        eprintln!("warning: horizon {h} exceeds the trained prediction length; skipped");
    }
    print!("{}", table.to_console());
    let (nmse, nmae) = pipeline::naive_repeat_metrics(&test_w)?;
    println!("naive-repeat baseline: mse={nmse:.6} mae={nmae:.6}");
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, table.to_csv())?;
    println!("metrics written to {}", out.display());
    Ok(())
}

fn calibrate(args: &ConfigArgs, checkpoint: &Path, input: Option<&Path>) -> Result<(), Error> {
    let loaded = args.load(input)?;
    echo(&loaded);
    let (mut model, _) = load_checkpoint(checkpoint)?;
    let mut data_cfg = model.config.clone();
    data_cfg.data_path = loaded.config.data_path.clone();
    data_cfg.dataset_name = loaded.config.dataset_name.clone();
    let frame = pipeline::load_frame(&data_cfg)?;
    let [train_w, _, _] = pipeline::split_frame(&data_cfg, &frame)?;
    let s = pipeline::calibrate_model_scale(&mut model, &train_w, 1024)?;
    println!("latent_scale={s}");
    Ok(())
}
