//! Synthetic face-like secrets, forged variants and textured covers.

use std::f64::consts::PI;

use rand::Rng;
use stegalift::Tensor;

/// Side of one checkerboard cell of the forgery artifact, in pixels.
pub const ARTIFACT_CELL: usize = 2;
pub const ARTIFACT_AMPLITUDE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub channels: usize,
}

/// One generated pair: the secret to hide, its cover and the label
/// (1 = forged).
#[derive(Clone, Debug)]
pub struct Sample {
    pub secret: Tensor,
    pub cover: Tensor,
    pub label: u8,
}

fn coords(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A smooth blob face: low-frequency background, soft elliptical skin
/// region and three dark blobs for eyes and mouth.
pub fn real_secret<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Tensor {
    let n = cfg.image_size;
    let bg: Vec<f64> = (0..cfg.channels).map(|_| rng.random_range(0.25..0.6)).collect();
    let skin: Vec<f64> = [0.78, 0.62, 0.52]
        .iter()
        .cycle()
        .take(cfg.channels)
        .map(|s| s + rng.random_range(-0.08..0.08))
        .collect();
    let (fx, fy) = (rng.random_range(0..3) as f64, rng.random_range(0..3) as f64);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (cx, cy) = (rng.random_range(0.42..0.58), rng.random_range(0.42..0.58));
    let (rx, ry) = (rng.random_range(0.25..0.33), rng.random_range(0.3..0.38));
    let shade = rng.random_range(0.5..1.5);
    let blobs = [
        (cx - 0.4 * rx, cy - 0.3 * ry, 0.05),
        (cx + 0.4 * rx, cy - 0.3 * ry, 0.05),
        (cx, cy + 0.45 * ry, 0.07),
    ];
    let mut out = Tensor::zeros(&[cfg.channels, n, n]);
    let data = out.data_mut();
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (coords(x, n), coords(y, n));
            let wave = 0.08 * (2.0 * PI * (fx * u + fy * v) + phase).sin();
            let r2 = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            let mask = sigmoid(8.0 * (1.0 - r2));
            let dark: f64 = blobs
                .iter()
                .map(|&(bx, by, s)| 0.25 * (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * s * s)).exp())
                .sum();
            let light = 0.04 * shade * (PI * (u - cx) / rx).cos();
            for c in 0..cfg.channels {
                let face = skin[c] + light - dark;
                let val = (1.0 - mask) * (bg[c] + wave) + mask * face;
                data[(c * n + y) * n + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Add a checkerboard patch of 2×2-pixel cells inside the face region.
pub fn plant_artifact<R: Rng + ?Sized>(img: &mut Tensor, rng: &mut R) {
    let (c, h, w) = img.dims3("plant_artifact").expect("images are C×H×W");
    let side = (h.min(w) / 2).max(2 * ARTIFACT_CELL) / (2 * ARTIFACT_CELL) * (2 * ARTIFACT_CELL);
    let mut span = |n: usize| {
        let lo = n / 4;
        let hi = (3 * n / 4).saturating_sub(side).max(lo);
        rng.random_range(lo / ARTIFACT_CELL..=hi / ARTIFACT_CELL) * ARTIFACT_CELL
    };
    let (y0, x0) = (span(h), span(w));
    let data = img.data_mut();
    for ch in 0..c {
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                let sign = if ((y - y0) / ARTIFACT_CELL + (x - x0) / ARTIFACT_CELL).is_multiple_of(2) {
                    1.0
                } else {
                    -1.0
                };
                let v = &mut data[(ch * h + y) * w + x];
                *v = (*v + sign * ARTIFACT_AMPLITUDE).clamp(0.0, 1.0);
            }
        }
    }
}

pub fn fake_secret<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Tensor {
    let mut img = real_secret(cfg, rng);
    plant_artifact(&mut img, rng);
    img
}

/// Natural-looking texture: random oriented sinusoids with amplitude
/// falling as `1/f`, plus faint per-pixel noise.
pub fn cover<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Tensor {
    let n = cfg.image_size;
    let max_f = (n / 8).max(1) as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|_| {
            let f = rng.random_range(1.0..=max_f);
            let theta = rng.random_range(0.0..PI);
            let amp = 0.15 / f;
            (f * theta.cos(), f * theta.sin(), amp, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let base: Vec<f64> = (0..cfg.channels).map(|_| rng.random_range(0.35..0.65)).collect();
    let tint: Vec<f64> = (0..cfg.channels).map(|_| rng.random_range(0.7..1.3)).collect();
    let mut out = Tensor::zeros(&[cfg.channels, n, n]);
    let data = out.data_mut();
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (coords(x, n), coords(y, n));
            let tex: f64 = waves
                .iter()
                .map(|&(kx, ky, a, p)| a * (2.0 * PI * (kx * u + ky * v) + p).sin())
                .sum();
            for c in 0..cfg.channels {
                let noise = rng.random_range(-0.005..0.005);
                data[(c * n + y) * n + x] = (base[c] + tint[c] * tex + noise).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// `count` samples alternating real and forged, so the classes are exactly
/// balanced for even counts.
pub fn generate<R: Rng + ?Sized>(cfg: &SynthConfig, count: usize, rng: &mut R) -> Vec<Sample> {
    (0..count)
        .map(|k| {
            let label = (k % 2) as u8;
            let secret = if label == 1 { fake_secret(cfg, rng) } else { real_secret(cfg, rng) };
            Sample {
                secret,
                cover: cover(cfg, rng),
                label,
            }
        })
        .collect()
}
