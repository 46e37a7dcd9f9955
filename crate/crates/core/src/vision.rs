//! Time-series-to-image transforms: periodic segmentation (SEG), Gramian
//! angular field (GAF), and recurrence plot (RP), stacked into a
//! three-channel image, plus period auto-selection and PNG export.
//!
//! All encoders are pure functions of the window and config; batch items are
//! independent and encoded in parallel.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::resize::bilinear_resize;
use crate::numerics::tensor::Tensor;

pub const MINMAX_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpVariant {
    /// exp(−‖X_i − X_j‖²/2) on the feature vectors at each time point.
    Gaussian,
    /// Θ(ε − ‖x⃗_i − x⃗_j‖) over delay-embedded phase-space vectors.
    Heaviside,
}

#[derive(Debug, Clone)]
pub struct VisionConfig {
    /// Period used by the segmentation channel.
    pub period: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub epsilon: f64,
    pub rp_variant: RpVariant,
    /// Phase-space embedding dimension (heaviside variant).
    pub rp_embed: usize,
    /// Phase-space time delay (heaviside variant).
    pub rp_delay: usize,
    /// Recurrence threshold; `None` uses the median pairwise distance.
    pub rp_threshold: Option<f64>,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            period: 24,
            image_h: 64,
            image_w: 64,
            epsilon: MINMAX_EPS,
            rp_variant: RpVariant::Gaussian,
            rp_embed: 1,
            rp_delay: 1,
            rp_threshold: None,
        }
    }
}

/// B×3×H×W image batch with every pixel in [0, 1] and channel order
/// [SEG; GAF; RP].
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pixels: Tensor,
}

pub const CHANNEL_NAMES: [&str; 3] = ["seg", "gaf", "rp"];

impl ImageTensor {
    /// Validates rank, channel count, and pixel range.
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Dimension(format!(
                "ImageTensor expects B×3×H×W, got {s:?}"
            )));
        }
        if let Some(&bad) = pixels
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Invariant(format!(
                "pixel {bad} outside [0, 1]"
            )));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn batch(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    /// One channel plane of one batch item.
    pub fn channel(&self, b: usize, c: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let start = ((b * 3) + c) * h * w;
        Tensor::new(vec![h, w], self.pixels.data()[start..start + h * w].to_vec())
    }
}

/// Min-max map to [0, 1): x̃ = (x − min)/(max − min + ε). Constant series
/// collapse to zero.
pub fn minmax_normalize(x: &[f64], epsilon: f64) -> Vec<f64> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = hi - lo + epsilon;
    x.iter().map(|&v| (v - lo) / denom).collect()
}

fn minmax_image(img: &Tensor, epsilon: f64) -> Tensor {
    Tensor::new(
        img.shape().to_vec(),
        minmax_normalize(img.data(), epsilon),
    )
}

/// Zero-padded period grid: left-pad the series so its length divides the
/// period, then reshape row-major so row i is the i-th period.
pub fn seg_grid(series: &[f64], period: usize) -> Tensor {
    assert!(period >= 1);
    let l = series.len();
    let p = (period - l % period) % period;
    let rows = (l + p) / period;
    let mut data = vec![0.0; rows * period];
    data[p..].copy_from_slice(series);
    Tensor::new(vec![rows, period], data)
}

fn series_of(x: &Tensor, b: usize, d: usize) -> Vec<f64> {
    let s = x.shape();
    let (l, dd) = (s[1], s[2]);
    (0..l).map(|t| x.data()[(b * l + t) * dd + d]).collect()
}

fn encode_channel_per_feature(
    x: &Tensor,
    cfg: &VisionConfig,
    f: impl Fn(&[f64]) -> Result<Tensor> + Sync + Send,
) -> Result<Tensor> {
    let s = x.shape();
    let (b, d) = (s[0], s[2]);
    let (h, w) = (cfg.image_h, cfg.image_w);
    let planes = crate::par::map_range(b, |bi| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; h * w];
        for di in 0..d {
            let plane = f(&series_of(x, bi, di))?;
            for (a, &v) in acc.iter_mut().zip(plane.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / d as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    });
    let mut out = Vec::with_capacity(b * h * w);
    for p in planes {
        out.extend(p?);
    }
    Ok(Tensor::new(vec![b, h, w], out))
}

/// Segmentation channel: per feature, reshape the zero-padded series into a
/// period grid, resize, min-max normalize, then average over features.
pub fn seg_encode(x: &Tensor, cfg: &VisionConfig) -> Result<Tensor> {
    encode_channel_per_feature(x, cfg, |series| {
        let grid = seg_grid(series, cfg.period);
        let resized = bilinear_resize(&grid, cfg.image_h, cfg.image_w)?;
        Ok(minmax_image(&resized, cfg.epsilon))
    })
}

/// Gramian angular field of one series: G_ij = cos(θ_i + θ_j) with
/// θ = arccos of the min-max normalized value. Symmetric, in [−1, 1].
pub fn gaf_matrix(series: &[f64], epsilon: f64) -> Tensor {
    let norm = minmax_normalize(series, epsilon);
    let theta: Vec<f64> = norm.iter().map(|&v| v.clamp(0.0, 1.0).acos()).collect();
    let l = theta.len();
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        for j in i..l {
            let v = (theta[i] + theta[j]).cos();
            out[i * l + j] = v;
            out[j * l + i] = v;
        }
    }
    Tensor::new(vec![l, l], out)
}

/// GAF channel: per-feature angular fields averaged over features, resized,
/// then affinely mapped from [−1, 1] to [0, 1].
pub fn gaf_encode(x: &Tensor, cfg: &VisionConfig) -> Result<Tensor> {
    let s = x.shape();
    let (b, d) = (s[0], s[2]);
    let l = s[1];
    let (h, w) = (cfg.image_h, cfg.image_w);
    let planes = crate::par::map_range(b, |bi| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; l * l];
        for di in 0..d {
            let m = gaf_matrix(&series_of(x, bi, di), cfg.epsilon);
            for (a, &v) in acc.iter_mut().zip(m.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / d as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        let resized = bilinear_resize(&Tensor::new(vec![l, l], acc), h, w)?;
        Ok(resized
            .data()
            .iter()
            .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect())
    });
    let mut out = Vec::with_capacity(b * h * w);
    for p in planes {
        out.extend(p?);
    }
    Ok(Tensor::new(vec![b, h, w], out))
}

/// Recurrence matrix of one window (L×D rows as points).
pub fn rp_matrix(window_rows: &[Vec<f64>], cfg: &VisionConfig) -> Result<Tensor> {
    match cfg.rp_variant {
        RpVariant::Gaussian => {
            let n = window_rows.len();
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let d2: f64 = window_rows[i]
                        .iter()
                        .zip(&window_rows[j])
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum();
                    let v = (-d2 / 2.0).exp();
                    out[i * n + j] = v;
                    out[j * n + i] = v;
                }
            }
            Ok(Tensor::new(vec![n, n], out))
        }
        RpVariant::Heaviside => {
            let l = window_rows.len();
            let (m, tau) = (cfg.rp_embed, cfg.rp_delay);
            if m < 1 || tau < 1 || l < (m - 1) * tau + 1 {
                return Err(Error::Config(format!(
                    "phase-space embedding (m={m}, tau={tau}) invalid for length {l}"
                )));
            }
            let n = l - (m - 1) * tau;
            // Embedded point i concatenates rows i, i+tau, ..., i+(m-1)tau.
            let dist = |i: usize, j: usize| -> f64 {
                let mut d2 = 0.0;
                for k in 0..m {
                    for (a, b) in window_rows[i + k * tau].iter().zip(&window_rows[j + k * tau]) {
                        d2 += (a - b) * (a - b);
                    }
                }
                d2.sqrt()
            };
            let threshold = match cfg.rp_threshold {
                Some(t) => t,
                None => {
                    let mut ds = Vec::with_capacity(n * (n - 1) / 2);
                    for i in 0..n {
                        for j in i + 1..n {
                            ds.push(dist(i, j));
                        }
                    }
                    if ds.is_empty() {
                        1.0
                    } else {
                        ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        ds[ds.len() / 2]
                    }
                }
            };
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in i..n {
                    let v = if threshold - dist(i, j) >= 0.0 { 1.0 } else { 0.0 };
                    out[i * n + j] = v;
                    out[j * n + i] = v;
                }
            }
            Ok(Tensor::new(vec![n, n], out))
        }
    }
}

fn window_rows(x: &Tensor, b: usize) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (l, d) = (s[1], s[2]);
    (0..l)
        .map(|t| (0..d).map(|di| x.data()[(b * l + t) * d + di]).collect())
        .collect()
}

/// Recurrence-plot channel.
pub fn rp_encode(x: &Tensor, cfg: &VisionConfig) -> Result<Tensor> {
    let s = x.shape();
    let b = s[0];
    let (h, w) = (cfg.image_h, cfg.image_w);
    let planes = crate::par::map_range(b, |bi| -> Result<Vec<f64>> {
        let m = rp_matrix(&window_rows(x, bi), cfg)?;
        let resized = bilinear_resize(&m, h, w)?;
        Ok(resized.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect())
    });
    let mut out = Vec::with_capacity(b * h * w);
    for p in planes {
        out.extend(p?);
    }
    Ok(Tensor::new(vec![b, h, w], out))
}

/// Stack the three channels in the fixed order [SEG; GAF; RP].
pub fn compose_image(seg: &Tensor, gaf: &Tensor, rp: &Tensor) -> Result<ImageTensor> {
    if seg.shape() != gaf.shape() || seg.shape() != rp.shape() {
        return Err(Error::Dimension(format!(
            "channel shapes differ: {:?} / {:?} / {:?}",
            seg.shape(),
            gaf.shape(),
            rp.shape()
        )));
    }
    let s = seg.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut out = vec![0.0; b * 3 * plane];
    for bi in 0..b {
        for (c, src) in [seg, gaf, rp].into_iter().enumerate() {
            out[(bi * 3 + c) * plane..(bi * 3 + c + 1) * plane]
                .copy_from_slice(&src.data()[bi * plane..(bi + 1) * plane]);
        }
    }
    ImageTensor::new(Tensor::new(vec![b, 3, h, w], out))
}

/// Full three-channel encoding of a normalized window batch.
pub fn encode_windows(x: &Tensor, cfg: &VisionConfig) -> Result<ImageTensor> {
    let seg = seg_encode(x, cfg)?;
    let gaf = gaf_encode(x, cfg)?;
    let rp = rp_encode(x, cfg)?;
    compose_image(&seg, &gaf, &rp)
}

/// Sequential twin of [`encode_windows`], kept for benchmark comparison.
pub fn encode_windows_seq(x: &Tensor, cfg: &VisionConfig) -> Result<ImageTensor> {
    let s = x.shape();
    let (b, l, d) = (s[0], s[1], s[2]);
    let mut images = Vec::with_capacity(b);
    for bi in 0..b {
        let one = Tensor::new(
            vec![1, l, d],
            x.data()[bi * l * d..(bi + 1) * l * d].to_vec(),
        );
        let seg = seg_encode(&one, cfg)?;
        let gaf = gaf_encode(&one, cfg)?;
        let rp = rp_encode(&one, cfg)?;
        images.push(compose_image(&seg, &gaf, &rp)?);
    }
    let plane = 3 * cfg.image_h * cfg.image_w;
    let mut out = Vec::with_capacity(b * plane);
    for img in images {
        out.extend_from_slice(img.pixels().data());
    }
    ImageTensor::new(Tensor::new(vec![b, 3, cfg.image_h, cfg.image_w], out))
}

/// Sum of Pearson correlations between adjacent columns of the period grid.
/// Zero-variance columns contribute 0.
pub fn period_objective(series: &[f64], period: usize) -> f64 {
    let rows = series.len() / period;
    if rows < 2 {
        return 0.0;
    }
    let col = |j: usize| -> Vec<f64> { (0..rows).map(|i| series[i * period + j]).collect() };
    let mut total = 0.0;
    for j in 0..period - 1 {
        total += pearson(&col(j), &col(j + 1));
    }
    total
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

/// Pick the period maximizing adjacent-column correlation of the reshaped
/// grid (full rows only). Ties break to the smallest candidate.
pub fn select_period(series: &[f64], candidates: &[usize]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Config("select_period with no candidates".into()));
    }
    for &k in candidates {
        if k == 0 || series.len() < 2 * k {
            return Err(Error::Config(format!(
                "candidate period {k} needs at least {} points, series has {}",
                2 * k,
                series.len()
            )));
        }
    }
    let mut sorted: Vec<usize> = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best = sorted[0];
    let mut best_score = f64::NEG_INFINITY;
    for &k in &sorted {
        let score = period_objective(series, k);
        if score > best_score {
            best_score = score;
            best = k;
        }
    }
    Ok(best)
}

fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Write one RGB PNG per batch item (R=SEG, G=GAF, B=RP) plus per-channel
/// grayscale PNGs, named `{split}_{index}_{channel}.png`. Returns the paths.
pub fn export_png(
    img: &ImageTensor,
    dir: &Path,
    split: &str,
    start_index: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (img.height(), img.width());
    let mut paths = Vec::new();
    for b in 0..img.batch() {
        let idx = start_index + b;
        let channels: Vec<Tensor> = (0..3).map(|c| img.channel(b, c)).collect();
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    quantize(channels[0].at(&[y, x])),
                    quantize(channels[1].at(&[y, x])),
                    quantize(channels[2].at(&[y, x])),
                ];
                rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let rgb_path = dir.join(format!("{split}_{idx:06}_rgb.png"));
        rgb.save(&rgb_path)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        paths.push(rgb_path);
        for (c, name) in CHANNEL_NAMES.iter().enumerate() {
            let mut gray = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    gray.put_pixel(
                        x as u32,
                        y as u32,
                        image::Luma([quantize(channels[c].at(&[y, x]))]),
                    );
                }
            }
            let path = dir.join(format!("{split}_{idx:06}_{name}.png"));
            gray.save(&path)
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn batch_of(series: &[f64]) -> Tensor {
        Tensor::new(vec![1, series.len(), 1], series.to_vec())
    }

    #[test]
    fn minmax_basic_and_constant() {
        let out = minmax_normalize(&[0.0, 5.0, 10.0], MINMAX_EPS);
        assert!((out[0] - 0.0).abs() < 1e-8);
        assert!((out[1] - 0.5).abs() < 1e-8);
        assert!((out[2] - 1.0).abs() < 1e-8);
        assert_eq!(minmax_normalize(&[7.0, 7.0, 7.0], MINMAX_EPS), vec![0.0; 3]);
    }

    #[test]
    fn minmax_matches_scalar_oracle() {
        let mut rng = RngStream::new(20, "minmax");
        let xs: Vec<f64> = (0..37).map(|_| rng.normal()).collect();
        let got = minmax_normalize(&xs, MINMAX_EPS);
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, &x) in xs.iter().enumerate() {
            let want = (x - lo) / (hi - lo + MINMAX_EPS);
            assert_eq!(got[i], want);
        }
    }

    #[test]
    fn seg_native_grid_is_a_pure_reshape() {
        // L=4, T=2, no resize, psi is affine: grid [[0,1],[2,3]] maps to
        // [[0,1/3],[2/3,1]] (up to the epsilon in the denominator).
        let cfg = VisionConfig {
            period: 2,
            image_h: 2,
            image_w: 2,
            ..Default::default()
        };
        let x = batch_of(&[0.0, 1.0, 2.0, 3.0]);
        let out = seg_encode(&x, &cfg).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in out.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn seg_pads_on_the_left() {
        // L=5, T=2 -> one pad slot, grid 3×2, earliest slot zeroed.
        let grid = seg_grid(&[1.0, 2.0, 3.0, 4.0, 5.0], 2);
        assert_eq!(grid.shape(), &[3, 2]);
        assert_eq!(grid.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn seg_periodic_series_gives_constant_columns() {
        // Period-24 sinusoid reshaped at T=24: every row identical, checked
        // against an explicit reshape oracle.
        let l = 96;
        let series: Vec<f64> = (0..l)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 24.0).sin())
            .collect();
        let grid = seg_grid(&series, 24);
        assert_eq!(grid.shape(), &[4, 24]);
        // Oracle: direct double loop.
        for i in 0..4 {
            for j in 0..24 {
                assert_eq!(grid.at(&[i, j]), series[i * 24 + j]);
            }
        }
        for j in 0..24 {
            for i in 1..4 {
                assert!((grid.at(&[i, j]) - grid.at(&[0, j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gaf_constant_series_maps_to_zero_pixels() {
        let cfg = VisionConfig {
            image_h: 3,
            image_w: 3,
            ..Default::default()
        };
        let x = batch_of(&[4.0, 4.0, 4.0]);
        let out = gaf_encode(&x, &cfg).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-7, "pixel {v}");
        }
    }

    #[test]
    fn gaf_two_point_series_hits_endpoint_angles() {
        // x̃ = [0, 1/(1+ε)], so the max angle is arccos(1/(1+ε)) ≈ √(2ε),
        // about 1.41e-4 for ε = 1e-8. Off-diagonals deviate from 0 by that
        // amount.
        let slack = (2.0 * MINMAX_EPS).sqrt() * 1.05;
        let m = gaf_matrix(&[0.0, 1.0], MINMAX_EPS);
        assert!((m.at(&[0, 0]) + 1.0).abs() < slack);
        assert!(m.at(&[0, 1]).abs() < slack);
        assert!(m.at(&[1, 0]).abs() < slack);
        assert!((m.at(&[1, 1]) - 1.0).abs() < slack);
    }

    #[test]
    fn gaf_matches_double_loop_oracle() {
        let mut rng = RngStream::new(21, "gaf");
        let series: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let m = gaf_matrix(&series, MINMAX_EPS);
        let norm = minmax_normalize(&series, MINMAX_EPS);
        for i in 0..8 {
            for j in 0..8 {
                let want = (norm[i].acos() + norm[j].acos()).cos();
                assert!((m.at(&[i, j]) - want).abs() < 1e-10);
            }
        }
        // Symmetry and range.
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(m.at(&[i, j]), m.at(&[j, i]));
                assert!(m.at(&[i, j]) >= -1.0 - 1e-12 && m.at(&[i, j]) <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn rp_identical_rows_give_all_ones() {
        let rows = vec![vec![0.3, -0.7]; 5];
        let m = rp_matrix(&rows, &VisionConfig::default()).unwrap();
        for &v in m.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn rp_gaussian_plug_in_value() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let m = rp_matrix(&rows, &VisionConfig::default()).unwrap();
        assert!((m.at(&[0, 1]) - (-1.0f64).exp()).abs() < 1e-12);
        assert!((m.at(&[0, 1]) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn rp_matches_pairwise_distance_oracle() {
        let mut rng = RngStream::new(22, "rp");
        let x = rng.normal_tensor(vec![1, 8, 3]);
        let m = rp_matrix(&window_rows(&x, 0), &VisionConfig::default()).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut d2 = 0.0;
                for k in 0..3 {
                    let diff = x.at(&[0, i, k]) - x.at(&[0, j, k]);
                    d2 += diff * diff;
                }
                let want = (-d2 / 2.0).exp();
                assert!((m.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
        // Unit diagonal, symmetry, (0, 1] range.
        for i in 0..8 {
            assert_eq!(m.at(&[i, i]), 1.0);
            for j in 0..8 {
                assert_eq!(m.at(&[i, j]), m.at(&[j, i]));
                assert!(m.at(&[i, j]) > 0.0 && m.at(&[i, j]) <= 1.0);
            }
        }
    }

    #[test]
    fn rp_heaviside_is_binary_and_symmetric() {
        let mut rng = RngStream::new(23, "rph");
        let x = rng.normal_tensor(vec![1, 12, 1]);
        let cfg = VisionConfig {
            rp_variant: RpVariant::Heaviside,
            rp_embed: 2,
            rp_delay: 1,
            ..Default::default()
        };
        let m = rp_matrix(&window_rows(&x, 0), &cfg).unwrap();
        assert_eq!(m.shape(), &[11, 11]);
        for i in 0..11 {
            assert_eq!(m.at(&[i, i]), 1.0);
            for j in 0..11 {
                let v = m.at(&[i, j]);
                assert!(v == 0.0 || v == 1.0);
                assert_eq!(v, m.at(&[j, i]));
            }
        }
    }

    #[test]
    fn rp_invalid_embedding_is_a_config_error() {
        let cfg = VisionConfig {
            rp_variant: RpVariant::Heaviside,
            rp_embed: 5,
            rp_delay: 3,
            ..Default::default()
        };
        let rows = vec![vec![0.0]; 10];
        assert!(matches!(rp_matrix(&rows, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn compose_keeps_channel_order_and_range() {
        let seg = Tensor::full(vec![2, 4, 4], 0.2);
        let gaf = Tensor::full(vec![2, 4, 4], 0.5);
        let rp = Tensor::full(vec![2, 4, 4], 0.8);
        let img = compose_image(&seg, &gaf, &rp).unwrap();
        assert_eq!(img.pixels().shape(), &[2, 3, 4, 4]);
        for b in 0..2 {
            assert_eq!(img.channel(b, 0).data()[0], 0.2);
            assert_eq!(img.channel(b, 1).data()[0], 0.5);
            assert_eq!(img.channel(b, 2).data()[0], 0.8);
        }
        // Channel extraction is the exact inverse of composition.
        assert_eq!(img.channel(1, 1).data(), gaf.data()[16..32].to_vec());
    }

    #[test]
    fn out_of_range_pixels_violate_the_invariant() {
        let ok = Tensor::full(vec![1, 2, 2], 0.5);
        let bad = Tensor::full(vec![1, 2, 2], 1.5);
        assert!(matches!(
            compose_image(&ok, &bad, &ok),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn encode_windows_matches_sequential_twin() {
        let mut rng = RngStream::new(24, "batch");
        let x = rng.normal_tensor(vec![3, 48, 2]);
        let cfg = VisionConfig {
            period: 12,
            image_h: 16,
            image_w: 16,
            ..Default::default()
        };
        let a = encode_windows(&x, &cfg).unwrap();
        let b = encode_windows_seq(&x, &cfg).unwrap();
        assert_eq!(a.pixels().data(), b.pixels().data());
    }

    #[test]
    fn select_period_tie_breaks_small_and_handles_singletons() {
        let series = vec![1.0; 24];
        assert_eq!(select_period(&series, &[2, 3]).unwrap(), 2);
        let mut rng = RngStream::new(25, "period");
        let series: Vec<f64> = (0..21).map(|_| rng.normal()).collect();
        assert_eq!(select_period(&series, &[7]).unwrap(), 7);
        assert!(matches!(
            select_period(&series, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn select_period_finds_the_true_cycle() {
        let mut rng = RngStream::new(0, "noisy-period");
        let series: Vec<f64> = (0..240)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 24.0).sin() + 0.05 * rng.normal())
            .collect();
        let candidates = [6usize, 8, 12, 24];
        let got = select_period(&series, &candidates).unwrap();
        // Oracle: direct evaluation of the correlation objective.
        let mut best = candidates[0];
        let mut best_score = f64::NEG_INFINITY;
        for &k in &candidates {
            let rows = series.len() / k;
            let mut score = 0.0;
            for j in 0..k - 1 {
                let a: Vec<f64> = (0..rows).map(|i| series[i * k + j]).collect();
                let b: Vec<f64> = (0..rows).map(|i| series[i * k + j + 1]).collect();
                score += pearson(&a, &b);
            }
            if score > best_score {
                best_score = score;
                best = k;
            }
        }
        assert_eq!(got, best);
    }

    #[test]
    fn png_quantization_endpoints_and_round_trip() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128); // round-half-up

        let mut rng = RngStream::new(26, "png");
        let x = rng.normal_tensor(vec![1, 24, 1]);
        let cfg = VisionConfig {
            period: 6,
            image_h: 8,
            image_w: 8,
            ..Default::default()
        };
        let img = encode_windows(&x, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_png(&img, dir.path(), "test", 0).unwrap();
        assert_eq!(paths.len(), 4);
        // Decode, re-encode, compare bytes.
        let original = std::fs::read(&paths[0]).unwrap();
        let decoded = image::open(&paths[0]).unwrap().to_rgb8();
        let reencoded_path = dir.path().join("reencoded.png");
        decoded.save(&reencoded_path).unwrap();
        let reencoded = std::fs::read(&reencoded_path).unwrap();
        assert_eq!(original, reencoded);
        // And the decoded bytes are the quantized pixels.
        let ch0 = img.channel(0, 0);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(decoded.get_pixel(x as u32, y as u32)[0], quantize(ch0.at(&[y, x])));
            }
        }
    }

    #[test]
    fn encoders_are_deterministic() {
        let mut rng = RngStream::new(27, "det");
        let x = rng.normal_tensor(vec![2, 32, 2]);
        let cfg = VisionConfig {
            period: 8,
            image_h: 16,
            image_w: 16,
            ..Default::default()
        };
        let a = encode_windows(&x, &cfg).unwrap();
        let b = encode_windows(&x, &cfg).unwrap();
        for (x1, x2) in a.pixels().data().iter().zip(b.pixels().data()) {
            assert_eq!(x1.to_bits(), x2.to_bits());
        }
    }
}
