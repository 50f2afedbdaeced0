//! Synthetic grayscale segmentation samples: textured background, rotated
//! elliptical blobs with per-blob intensity offsets, Gaussian-blurred
//! boundaries in the image only, white noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{derive_seed, rng_for};
use crate::sample::{ClassMap, Sample};

pub const BASE_INTENSITY: f64 = 0.3;
/// Amplitude of each of the two background sinusoids.
const TEXTURE_AMPLITUDE: f64 = 0.025;
const MAX_ATTEMPTS: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Training samples.
    pub count: usize,
    /// Test samples, drawn from indices after the training ones.
    pub test_count: usize,
    pub size: usize,
    pub num_classes: usize,
    pub blobs: (usize, usize),
    pub offset: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub noise_sigma: f64,
    pub texture: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 400,
            test_count: 100,
            size: 64,
            num_classes: 2,
            blobs: (1, 3),
            offset: (0.2, 0.5),
            blur_sigma: (0.5, 2.0),
            noise_sigma: 0.05,
            texture: true,
            seed: 42,
        }
    }
}

/// Side lengths must be a multiple of this to fit the default network.
pub const SIZE_MULTIPLE: usize = 32;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!("data.size must be a positive multiple of {SIZE_MULTIPLE}, got {}", self.size)));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("data.num_classes must be in 2..=255, got {}", self.num_classes)));
        }
        if self.blobs.0 == 0 || self.blobs.0 > self.blobs.1 {
            return Err(Error::Config(format!("data.blobs range {:?} is empty or zero", self.blobs)));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if !range_ok(self.offset) || !range_ok(self.blur_sigma) {
            return Err(Error::Config("data.offset and data.blur ranges must be finite, nonnegative and ordered".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("data.noise must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos: f64,
    sin: f64,
    class: u8,
    offset: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.ax) * (u / self.ax) + (v / self.ay) * (v / self.ay) <= 1.0
    }
}

fn uniform(rng: &mut crate::rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..hi) }
}

/// Sample `index` of the stream defined by `cfg.seed`. Pixel values are
/// multiples of 1/255, so an 8-bit file round trip reproduces them exactly.
pub fn generate_sample(cfg: &SyntheticConfig, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let base_seed = derive_seed(cfg.seed, index);
    for attempt in 0..MAX_ATTEMPTS {
        let sample = draw(cfg, base_seed.wrapping_add(attempt))?;
        if sample.mask.labels.iter().any(|c| *c != 0) {
            return Ok(sample);
        }
    }
    Err(Error::Contract(format!("sample {index}: no foreground after {MAX_ATTEMPTS} attempts")))
}

fn draw(cfg: &SyntheticConfig, seed: u64) -> Result<Sample> {
    let n = cfg.size;
    let s = n as f64;
    let mut rng = rng_for(seed, 0);
    let count = rng.random_range(cfg.blobs.0..=cfg.blobs.1);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let angle = rng.random_range(0.0..core::f64::consts::PI);
            Blob {
                cy: rng.random_range(0.15 * s..0.85 * s),
                cx: rng.random_range(0.15 * s..0.85 * s),
                ay: rng.random_range(s / 10.0..s / 4.0),
                ax: rng.random_range(s / 10.0..s / 4.0),
                cos: math::cos(angle),
                sin: math::sin(angle),
                class: rng.random_range(1..cfg.num_classes) as u8,
                offset: uniform(&mut rng, cfg.offset),
            }
        })
        .collect();
    let texture: [f64; 6] = core::array::from_fn(|i| match i {
        2 | 5 => rng.random_range(0.0..core::f64::consts::TAU),
        _ => rng.random_range(1..=3) as f64,
    });
    let sigma = uniform(&mut rng, cfg.blur_sigma);

    let mut mask = ClassMap::filled(n, n, 0);
    let mut image = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = BASE_INTENSITY;
            if cfg.texture {
                let tau = core::f64::consts::TAU;
                v += TEXTURE_AMPLITUDE * math::sin(tau * (texture[0] * py + texture[1] * px) / s + texture[2]);
                v += TEXTURE_AMPLITUDE * math::sin(tau * (texture[3] * py - texture[4] * px) / s + texture[5]);
            }
            if let Some(owner) = blobs.iter().rev().find(|b| b.contains(py, px)) {
                mask.set(y, x, owner.class);
                v += owner.offset;
            }
            image[y * n + x] = v;
        }
    }
    let mut image = gaussian_blur(&image, n, n, sigma);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
    for v in image.iter_mut() {
        if cfg.noise_sigma > 0.0 {
            *v += noise.sample(&mut rng);
        }
        *v = math::quantize_u8(v.clamp(0.0, 1.0)) as f64 / 255.0;
    }
    Sample::new(image, mask)
}

/// Separable Gaussian blur with replicated borders; `sigma = 0` is the identity.
pub fn gaussian_blur(image: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return image.to_vec();
    }
    let radius = math::ceil(3.0 * sigma) as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| math::exp(-((d * d) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let d = i as i64 - radius;
                    let (sy, sx) = if along_x {
                        (y, (x as i64 + d).clamp(0, w as i64 - 1) as usize)
                    } else {
                        ((y as i64 + d).clamp(0, h as i64 - 1) as usize, x)
                    };
                    acc += k * src[sy * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let tmp = pass(image, true);
    pass(&tmp, false)
}

/// The training and test splits of `cfg`.
pub fn generate_split(cfg: &SyntheticConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = (0..cfg.count).map(|i| generate_sample(cfg, i as u64)).collect::<Result<Vec<_>>>()?;
    let test = (cfg.count..cfg.count + cfg.test_count)
        .map(|i| generate_sample(cfg, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}
