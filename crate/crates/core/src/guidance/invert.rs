use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bank::ExemplarBank;
use super::denoise::{cross_backward, forward, Hooks, KeySource};
use super::schedule::mix;
use super::{sample_noise, sample_timestep, softmax_in_place, NoiseSchedule, PromptToken};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    /// Fixed (timestep, noise) draws per target image.
    pub draws_per_target: usize,
    pub t_range: [f64; 2],
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            steps: 100,
            lr: 0.1,
            draws_per_target: 8,
            t_range: [0.02, 0.6],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub classes: Vec<String>,
    pub weights: Vec<f64>,
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

fn loss_and_grad(bank: &ExemplarBank, theta: &[f64], draws: &[(usize, f64, Image)], targets: &[Image]) -> Result<(f64, Vec<f64>)> {
    let mut pi = theta.to_vec();
    softmax_in_place(&mut pi);
    let sources: Vec<KeySource> = bank
        .classes()
        .iter()
        .zip(&pi)
        .map(|(class, &w)| KeySource {
            class,
            bias: w.ln(),
            adapter: None,
        })
        .collect();
    let np = bank.patch_count();
    let scale = 1.0 / draws.len() as f64;
    let mut loss = 0.0;
    let mut g_bias = vec![0.0; pi.len()];
    for (target, alpha_bar, eps) in draws {
        let z_t = mix(&targets[*target], eps, *alpha_bar)?;
        let fw = forward(bank, &z_t, &sources, *alpha_bar, &Hooks::default())?;
        let cg = cross_backward(bank, &fw, &sources, eps);
        loss += cg.loss * scale;
        for i in 0..np {
            for (k, &s) in fw.key_source.iter().enumerate() {
                g_bias[s] += cg.g_logits[i * fw.keys + k] * scale;
            }
        }
    }
    // bias_c = θ_c − logsumexp(θ)
    let total: f64 = g_bias.iter().sum();
    let grad = g_bias.iter().zip(&pi).map(|(g, p)| g - p * total).collect();
    Ok((loss, grad))
}

/// Fits a class-mixture token whose denoising loss on `targets` is minimal.
/// Weights are the softmax of free logits, started uniform.
pub fn invert_image(
    bank: &ExemplarBank,
    targets: &[Image],
    schedule: &NoiseSchedule,
    config: &InversionConfig,
) -> Result<(PromptToken, InversionReport)> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("token inversion needs at least one target image".into()));
    }
    for img in targets {
        if img.shape() != (bank.width(), bank.height()) {
            return Err(Error::ShapeMismatch {
                class: "inversion target".into(),
                expected: (bank.width(), bank.height()),
                actual: img.shape(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draws = Vec::new();
    for k in 0..targets.len() {
        for _ in 0..config.draws_per_target.max(1) {
            let t = sample_timestep(&mut rng, config.t_range);
            draws.push((k, schedule.alpha_bar(t)?, sample_noise(&mut rng, bank.width(), bank.height())));
        }
    }
    let classes = bank.class_names();
    let mut theta = vec![0.0; classes.len()];
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), theta.len());
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let (loss, grad) = loss_and_grad(bank, &theta, &draws, targets)?;
        losses.push(loss);
        adam.step(&mut theta, &grad);
    }
    let (final_loss, _) = loss_and_grad(bank, &theta, &draws, targets)?;
    let mut weights = theta;
    softmax_in_place(&mut weights);
    // renormalize so the simplex constraint holds to rounding
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    let token = PromptToken::inverted(classes.clone(), weights.clone())?;
    Ok((
        token,
        InversionReport {
            classes,
            weights,
            losses,
            final_loss,
        },
    ))
}
