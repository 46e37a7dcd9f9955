//! Bilinear resampling with half-pixel centers.
//!
//! Output pixel i maps to source coordinate (i+0.5)·src/dst − 0.5, clamped to
//! the valid range, so resizing to the source size is the identity.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Per-axis sample positions: (low index, high index, weight of high).
pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Resample a 2-D image to (h, w).
pub fn bilinear_resize(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if img.rank() != 2 {
        return Err(Error::Dimension(format!(
            "bilinear_resize expects a 2-D image, got rank {}",
            img.rank()
        )));
    }
    let (r, c) = (img.shape()[0], img.shape()[1]);
    if r == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "bilinear_resize with zero-sized extent: {r}x{c} -> {h}x{w}"
        )));
    }
    if (r, c) == (h, w) {
        return Ok(img.clone());
    }
    let rows = axis_taps(r, h);
    let cols = axis_taps(c, w);
    let src = img.data();
    let mut out = vec![0.0; h * w];
    for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
        let top = &src[r0 * c..r0 * c + c];
        let bot = &src[r1 * c..r1 * c + c];
        let row = &mut out[i * w..(i + 1) * w];
        for (o, &(c0, c1, fx)) in row.iter_mut().zip(&cols) {
            let t = top[c0] + (top[c1] - top[c0]) * fx;
            let b = bot[c0] + (bot[c1] - bot[c0]) * fx;
            *o = t + (b - t) * fy;
        }
    }
    Ok(Tensor::new(vec![h, w], out))
}
