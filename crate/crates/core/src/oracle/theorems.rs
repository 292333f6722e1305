//! Numerical checks of the random-feature kernel limit and of the identity
//! encoder's Lipschitz bound.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{FourierConfig, FourierEncoder, FourierMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gaussian kernel `exp(-2 pi^2 sigma^2 |delta|^2)` approximated by random
/// Fourier features of bandwidth `sigma`.
pub fn gaussian_kernel(sigma: f64, delta_sq: f64) -> f64 {
    (-2.0 * PI * PI * sigma * sigma * delta_sq).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelRow {
    pub levels: usize,
    pub mean_abs_deviation: f64,
}

/// Mean `|<gamma(x), gamma(y)> - K(x - y)|` over `pairs` for each level count.
pub fn check_kernel(bandwidth: f64, seed: u64, pairs: &[([f64; 2], [f64; 2])], levels: &[usize]) -> Result<Vec<KernelRow>> {
    if pairs.is_empty() {
        return Err(Error::invalid("kernel check needs at least one pair"));
    }
    levels
        .iter()
        .map(|&m| {
            let enc = FourierEncoder::new(FourierConfig { levels: m, mode: FourierMode::GaussianRandom { bandwidth, seed } })?;
            let total: f64 = pairs
                .iter()
                .map(|(x, y)| {
                    let gx = enc.encode_normalized(*x);
                    let gy = enc.encode_normalized(*y);
                    let k: f64 = gx.iter().zip(&gy).map(|(a, b)| a * b).sum();
                    let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
                    (k - gaussian_kernel(bandwidth, d2)).abs()
                })
                .sum();
            Ok(KernelRow { levels: m, mean_abs_deviation: total / pairs.len() as f64 })
        })
        .collect()
}

/// Random coordinate pairs in `[-0.5, 0.5]^2`.
pub fn random_pairs(count: usize, seed: u64) -> Vec<([f64; 2], [f64; 2])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pt = || [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    (0..count).map(|_| (pt(), pt())).collect()
}

/// Affine layer `x W + b`, optionally followed by tanh.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub tanh: bool,
}

impl DenseLayer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (k, m) = (self.w.shape()[0], self.w.shape()[1]);
        debug_assert_eq!(x.len(), k);
        let mut out = self.b.data().to_vec();
        for (r, &xr) in x.iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += xr * self.w.data()[r * m + c];
            }
        }
        if self.tanh {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        out
    }
}

pub fn mlp_apply(layers: &[DenseLayer], x: &[f64]) -> Vec<f64> {
    layers.iter().fold(x.to_vec(), |h, l| l.apply(&h))
}

/// Largest singular value by power iteration on `W^T W`.
pub fn spectral_norm(w: &Tensor, iterations: usize, seed: u64) -> f64 {
    let (k, m) = (w.shape()[0], w.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let nv = norm(&v);
        if nv == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|a| *a /= nv);
        let u: Vec<f64> = (0..k).map(|r| (0..m).map(|c| w.data()[r * m + c] * v[c]).sum()).collect();
        sigma = norm(&u);
        v = (0..m).map(|c| (0..k).map(|r| w.data()[r * m + c] * u[r]).sum()).collect();
    }
    sigma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    pub bound: f64,
    pub violations: usize,
}

/// Compares `|f(x) - f(y)| / |x - y|` against the product of per-layer
/// spectral norms (tanh is 1-Lipschitz), with relative slack `1e-6`.
pub fn check_lipschitz(layers: &[DenseLayer], pairs: &[(Vec<f64>, Vec<f64>)], seed: u64) -> LipschitzReport {
    let bound: f64 = layers.iter().enumerate().map(|(i, l)| spectral_norm(&l.w, 100, seed.wrapping_add(i as u64))).product();
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for (x, y) in pairs {
        let dx: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dx == 0.0 {
            continue;
        }
        let fx = mlp_apply(layers, x);
        let fy = mlp_apply(layers, y);
        let df: f64 = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let r = df / dx;
        max_ratio = max_ratio.max(r);
        if r > bound * (1.0 + 1e-6) {
            violations += 1;
        }
    }
    LipschitzReport { max_ratio, bound, violations }
}
