//! Noise schedules, forward diffusion, reverse-step algebra, DDPM/DDIM
//! samplers, the denoising loss, and latent-scale calibration.
//!
//! Timesteps are 1-based: t ∈ {1..T}, with ᾱ_0 := 1 by convention.

use crate::error::{Error, Result};
use crate::numerics::autodiff::{Graph, Var};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β evenly spaced.
    Linear,
    /// √β evenly spaced, then squared.
    ScaledLinear,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled_linear" => Ok(Self::ScaledLinear),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::ScaledLinear => "scaled_linear",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::Index(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Build a schedule over T steps between the given β endpoints.
pub fn build_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let interp = |t: usize, lo: f64, hi: f64| {
        if t_steps == 1 {
            lo
        } else {
            lo + (hi - lo) * t as f64 / (t_steps - 1) as f64
        }
    };
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_steps).map(|t| interp(t, beta_start, beta_end)).collect(),
        ScheduleKind::ScaledLinear => (0..t_steps)
            .map(|t| {
                let r = interp(t, beta_start.sqrt(), beta_end.sqrt());
                r * r
            })
            .collect(),
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Closed-form forward marginal: z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε.
pub fn forward_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} differs from latent shape {:?}",
            eps.shape(),
            z0.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| sa * z + sb * e))
}

/// Invert the forward marginal for a known noise estimate:
/// ẑ₀ = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t.
pub fn predict_z0(z_t: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.zip_map(eps_hat, |z, e| (z - sb * e) / sa))
}

/// One stochastic ancestral step: posterior mean per the ε-parameterization
/// plus posterior-variance noise; the final step (t = 1) adds no noise.
pub fn ddpm_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let a = sched.alpha(t);
    let ab = sched.alpha_bar(t);
    let coeff = (1.0 - a) / (1.0 - ab).sqrt();
    let inv_sqrt_a = 1.0 / a.sqrt();
    let mut out = z_t.zip_map(eps_hat, |z, e| inv_sqrt_a * (z - coeff * e));
    if t > 1 {
        let sigma = ((1.0 - sched.alpha_bar(t - 1)) / (1.0 - ab) * sched.beta(t)).sqrt();
        for v in out.data_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(out)
}

/// One deterministic step from t to t_prev (0 allowed, ᾱ_0 = 1):
/// z_{t_prev} = √ᾱ_{t_prev}·ẑ₀ + √(1−ᾱ_{t_prev})·ε̂.
pub fn ddim_step(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Index(format!(
            "ddim requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let z0 = predict_z0(z_t, t, eps_hat, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    let (sa, sb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    Ok(z0.zip_map(eps_hat, |z, e| sa * z + sb * e))
}

/// Decreasing timestep sequence for DDIM: uniform stride ⌈T/steps⌉ from T,
/// always ending at 0.
pub fn ddim_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_total {
        return Err(Error::Config(format!(
            "inference steps must be in 1..={t_total}, got {steps}"
        )));
    }
    let stride = t_total.div_ceil(steps);
    let mut ts = Vec::with_capacity(steps + 1);
    let mut t = t_total;
    loop {
        ts.push(t);
        if t <= stride {
            break;
        }
        t -= stride;
    }
    ts.push(0);
    Ok(ts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl Sampler {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

/// Run the reverse process from pure noise. DDIM visits a `steps`-long
/// subsequence; DDPM walks all T steps regardless of `steps`. The noise
/// predictor closes over whatever conditioning it needs.
pub fn sample_loop<F>(
    shape: Vec<usize>,
    mut eps_theta: F,
    sched: &NoiseSchedule,
    sampler: Sampler,
    steps: usize,
    rng: &mut RngStream,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut z = rng.normal_tensor(shape);
    match sampler {
        Sampler::Ddim => {
            let ts = ddim_timesteps(sched.steps(), steps)?;
            for pair in ts.windows(2) {
                let eps_hat = eps_theta(&z, pair[0])?;
                z = ddim_step(&z, pair[0], pair[1], &eps_hat, sched)?;
            }
        }
        Sampler::Ddpm => {
            for t in (1..=sched.steps()).rev() {
                let eps_hat = eps_theta(&z, t)?;
                z = ddpm_step(&z, t, &eps_hat, sched, rng)?;
            }
        }
    }
    Ok(z)
}

/// Denoising objective on the graph: draws t (uniform in 1..=T), then ε,
/// forms z_t in-graph, and returns mean‖ε − ε̂‖². The draw order (t first,
/// then ε) is part of the contract for reproducibility.
pub fn diffusion_loss<F>(
    g: &mut Graph,
    z0: Var,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    eps_theta: F,
) -> Result<(Var, usize)>
where
    F: FnOnce(&mut Graph, Var, usize) -> Result<Var>,
{
    let t = rng.uniform_usize(sched.steps()) + 1;
    let eps = rng.normal_tensor(g.shape(z0).to_vec());
    let eps_in = g.constant(eps);
    let ab = sched.alpha_bar(t);
    let scaled_z0 = g.affine(z0, ab.sqrt(), 0.0);
    let scaled_eps = g.affine(eps_in, (1.0 - ab).sqrt(), 0.0);
    let z_t = g.add(scaled_z0, scaled_eps);
    let eps_hat = eps_theta(g, z_t, t)?;
    let loss = g.mse(eps_hat, eps_in);
    Ok((loss, t))
}

/// Scalar making scaled latents approximately unit variance.
#[derive(Debug, Clone, Copy)]
pub struct LatentScale {
    pub s: f64,
}

impl Default for LatentScale {
    /// Reference value used by the pretrained image autoencoder lineage.
    fn default() -> Self {
        Self { s: 0.18215 }
    }
}

/// s = 1/σ over all entries of the latent sample.
pub fn calibrate_scale(latents: &[Tensor]) -> Result<LatentScale> {
    if latents.len() < 2 {
        return Err(Error::Calibration(format!(
            "need at least 2 latent samples, got {}",
            latents.len()
        )));
    }
    let n: usize = latents.iter().map(|t| t.len()).sum();
    let mean: f64 = latents.iter().map(|t| t.sum()).sum::<f64>() / n as f64;
    let var: f64 = latents
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    if var == 0.0 {
        return Err(Error::Calibration("latent sample has zero variance".into()));
    }
    Ok(LatentScale {
        s: 1.0 / var.sqrt(),
    })
}
