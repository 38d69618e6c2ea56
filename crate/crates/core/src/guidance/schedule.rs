use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::image::Image;

/// Cosine ᾱ schedule on a discrete grid of `steps` with linear
/// interpolation for continuous `t ∈ (0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `alpha_bar[k]` for `k = 0..=steps`, with `alpha_bar[0] = 1`.
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Self {
        let f = |k: usize| {
            let x = (k as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prev_raw = 1.0;
        let mut acc = 1.0;
        for k in 1..=steps {
            let raw = f(k) / f0;
            let beta = (1.0 - raw / prev_raw).min(MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
            prev_raw = raw;
        }
        NoiseSchedule { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// ᾱ at grid step `k` (`0..=steps`).
    pub fn alpha_bar_step(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidArgument(format!("timestep {t} outside (0, 1)")));
        }
        let x = t * self.steps() as f64;
        let k = x.floor() as usize;
        let frac = x - k as f64;
        let a = self.alpha_bar[k];
        let b = self.alpha_bar[(k + 1).min(self.steps())];
        Ok(a + (b - a) * frac)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::cosine(1000)
    }
}

/// `z_t = √ᾱ_t·z + √(1−ᾱ_t)·ε`
pub fn add_noise(z: &Image, eps: &Image, t: f64, schedule: &NoiseSchedule) -> Result<Image> {
    let ab = schedule.alpha_bar(t)?;
    mix(z, eps, ab)
}

pub(crate) fn mix(z: &Image, eps: &Image, alpha_bar: f64) -> Result<Image> {
    check_len("noise pixels", z.len(), eps.len())?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = z.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Image::from_vec(z.width(), z.height(), data)
}

/// Everything needed to reproduce one noised training/guidance sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedSample {
    pub z: Image,
    pub eps: Image,
    pub t: f64,
    pub alpha_bar: f64,
    pub weight: f64,
}

impl NoisedSample {
    pub fn z_t(&self) -> Image {
        mix(&self.z, &self.eps, self.alpha_bar).expect("sample shapes agree")
    }
}
