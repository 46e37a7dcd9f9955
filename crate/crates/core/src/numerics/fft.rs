//! Full-length complex DFT of real input.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley–Tukey transform;
//! everything else goes through Bluestein's chirp-z reduction to a
//! power-of-two circular convolution. Output is the full spectrum
//! X_k = Σ_t x_t·e^{−2πikt/L}, split into real and imaginary parts.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Forward DFT of a real sequence. Returns (re, im), each of length L.
pub fn fft_full(x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::Dimension("fft_full on empty input".into()));
    }
    let n = x.len();
    let mut re: Vec<f64> = x.to_vec();
    let mut im = vec![0.0; n];
    if n.is_power_of_two() {
        fft_pow2(&mut re, &mut im, false);
    } else {
        bluestein(&mut re, &mut im);
    }
    Ok((re, im))
}

/// Convenience wrapper returning tensors.
pub fn fft_full_tensor(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (re, im) = fft_full(x.data())?;
    Ok((Tensor::from_vec(re), Tensor::from_vec(im)))
}

/// In-place radix-2 Cooley–Tukey. `inverse` flips the twiddle sign and
/// applies the 1/n factor.
fn fft_pow2(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let mut cur_r = 1.0;
            let mut cur_i = 0.0;
            for k in 0..len / 2 {
                let (ar, ai) = (re[i + k], im[i + k]);
                let (br, bi) = (re[i + k + len / 2], im[i + k + len / 2]);
                let tr = br * cur_r - bi * cur_i;
                let ti = br * cur_i + bi * cur_r;
                re[i + k] = ar + tr;
                im[i + k] = ai + ti;
                re[i + k + len / 2] = ar - tr;
                im[i + k + len / 2] = ai - ti;
                let nr = cur_r * wr - cur_i * wi;
                cur_i = cur_r * wi + cur_i * wr;
                cur_r = nr;
            }
            i += len;
        }
        len <<= 1;
    }
    if inverse {
        let inv = 1.0 / n as f64;
        for v in re.iter_mut() {
            *v *= inv;
        }
        for v in im.iter_mut() {
            *v *= inv;
        }
    }
}

/// Bluestein's algorithm: arbitrary-length DFT as a circular convolution of
/// chirp-premultiplied input with the conjugate chirp, done at a padded
/// power-of-two size.
fn bluestein(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let m = (2 * n - 1).next_power_of_two();
    // Chirp angles use n² mod 2n to keep arguments small.
    let mut chirp_r = vec![0.0; n];
    let mut chirp_i = vec![0.0; n];
    for k in 0..n {
        let sq = (k as u64 * k as u64) % (2 * n as u64);
        let ang = std::f64::consts::PI * sq as f64 / n as f64;
        chirp_r[k] = ang.cos();
        chirp_i[k] = -ang.sin();
    }
    let mut ar = vec![0.0; m];
    let mut ai = vec![0.0; m];
    for k in 0..n {
        ar[k] = re[k] * chirp_r[k] - im[k] * chirp_i[k];
        ai[k] = re[k] * chirp_i[k] + im[k] * chirp_r[k];
    }
    // b_k = conj(chirp_k) with wraparound symmetry b_{m-k} = b_k.
    let mut br = vec![0.0; m];
    let mut bi = vec![0.0; m];
    br[0] = chirp_r[0];
    bi[0] = -chirp_i[0];
    for k in 1..n {
        br[k] = chirp_r[k];
        bi[k] = -chirp_i[k];
        br[m - k] = br[k];
        bi[m - k] = bi[k];
    }
    fft_pow2(&mut ar, &mut ai, false);
    fft_pow2(&mut br, &mut bi, false);
    for k in 0..m {
        let r = ar[k] * br[k] - ai[k] * bi[k];
        let i = ar[k] * bi[k] + ai[k] * br[k];
        ar[k] = r;
        ai[k] = i;
    }
    fft_pow2(&mut ar, &mut ai, true);
    for k in 0..n {
        re[k] = ar[k] * chirp_r[k] - ai[k] * chirp_i[k];
        im[k] = ar[k] * chirp_i[k] + ai[k] * chirp_r[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    /// O(L²) direct DFT, the independent oracle.
    fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for k in 0..n {
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re[k] += v * ang.cos();
                im[k] += v * ang.sin();
            }
        }
        (re, im)
    }

    #[test]
    fn constant_input_is_dc_only() {
        let c = 2.5;
        let (re, im) = fft_full(&[c, c, c, c]).unwrap();
        assert!((re[0] - 4.0 * c).abs() < 1e-12);
        for k in 1..4 {
            assert!(re[k].abs() < 1e-12);
        }
        for k in 0..4 {
            assert!(im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let (re, im) = fft_full(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for k in 0..4 {
            assert!((re[k] - 1.0).abs() < 1e-12);
            assert!(im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(matches!(fft_full(&[]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn matches_naive_dft_on_random_input() {
        let mut rng = RngStream::new(0, "fft");
        for &n in &[16usize, 96, 7, 13, 1] {
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let (re, im) = fft_full(&x).unwrap();
            let (ore, oim) = naive_dft(&x);
            for k in 0..n {
                assert!((re[k] - ore[k]).abs() < 1e-10, "n={n} k={k}");
                assert!((im[k] - oim[k]).abs() < 1e-10, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn linearity() {
        let mut rng = RngStream::new(1, "fft-lin");
        let n = 96;
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let (a, b) = (1.7, -0.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(&xv, &yv)| a * xv + b * yv).collect();
        let (re_c, im_c) = fft_full(&combo).unwrap();
        let (re_x, im_x) = fft_full(&x).unwrap();
        let (re_y, im_y) = fft_full(&y).unwrap();
        for k in 0..n {
            assert!((re_c[k] - (a * re_x[k] + b * re_y[k])).abs() < 1e-10);
            assert!((im_c[k] - (a * im_x[k] + b * im_y[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn parseval() {
        let mut rng = RngStream::new(2, "fft-parseval");
        for &n in &[64usize, 96] {
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let (re, im) = fft_full(&x).unwrap();
            let time: f64 = x.iter().map(|v| v * v).sum();
            let freq: f64 = re
                .iter()
                .zip(&im)
                .map(|(&r, &i)| r * r + i * i)
                .sum::<f64>()
                / n as f64;
            assert!((time - freq).abs() / time.abs() < 1e-8, "n={n}");
        }
    }
}
