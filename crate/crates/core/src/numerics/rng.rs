//! Deterministic counter-based random streams.
//!
//! Each stream is keyed by a 64-bit seed and a label string; the i-th draw is
//! a pure function of (seed, label, i). Identical keys therefore reproduce
//! identical sequences across runs, platforms, and worker layouts. Gaussian
//! variates come from Box–Muller over consecutive counter values.

use crate::numerics::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over a byte string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    key: u64,
    counter: u64,
    cached_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let key = mix64(seed ^ fnv1a(label.as_bytes()));
        Self {
            seed,
            label: label.to_string(),
            key,
            counter: 0,
            cached_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Derive an independent child stream.
    pub fn fork(&self, label: &str) -> RngStream {
        RngStream::new(mix64(self.key ^ fnv1a(label.as_bytes())), label)
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key.wrapping_add(GOLDEN.wrapping_mul(self.counter)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box–Muller; pairs share two uniform draws.
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.cached_normal.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Normal truncated to ±2σ by resampling.
    pub fn trunc_normal(&mut self, sigma: f64) -> f64 {
        loop {
            let v = self.normal();
            if v.abs() <= 2.0 {
                return v * sigma;
            }
        }
    }

    pub fn normal_tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape, data)
    }

    pub fn uniform_tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform()).collect();
        Tensor::new(shape, data)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_usize(i + 1);
            items.swap(i, j);
        }
    }
}
