use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bank::{Adapter, ExemplarBank};
use super::denoise::{cross_backward, forward, resolve, Hooks};
use super::schedule::mix;
use super::{sample_noise, sample_timestep, Mat, NoiseSchedule, PromptToken};
use crate::error::Result;
use crate::image::Image;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub t_range: [f64; 2],
    /// Fixed draws used to report the loss before and after training.
    pub eval_draws: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 150,
            batch: 16,
            lr: 1e-3,
            seed: 0,
            t_range: [0.02, 0.98],
            eval_draws: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterReport {
    pub id: String,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

struct Draw {
    image: usize,
    alpha_bar: f64,
    eps: Image,
}

fn draws(rng: &mut ChaCha8Rng, count: usize, images: usize, schedule: &NoiseSchedule, cfg: &FinetuneConfig, w: usize, h: usize) -> Result<Vec<Draw>> {
    (0..count)
        .map(|_| {
            let image = rng.random_range(0..images);
            let t = sample_timestep(rng, cfg.t_range);
            Ok(Draw {
                image,
                alpha_bar: schedule.alpha_bar(t)?,
                eps: sample_noise(rng, w, h),
            })
        })
        .collect()
}

/// Mean loss over `draws` and, when `grad` is given, the accumulated
/// gradients for `[A_K, B_K, A_V, B_V]` (flattened in that order).
fn loss_and_grad(bank: &ExemplarBank, id: &str, draws: &[Draw], mut grad: Option<&mut [f64]>) -> Result<f64> {
    let token = PromptToken::adapter(id);
    let sources = resolve(bank, &token)?;
    let adapter = sources[0].adapter.expect("adapter token");
    let class = sources[0].class;
    let d = bank.dim();
    let np = bank.patch_count();
    let r = adapter.a_k.cols;
    let block = d * r;
    let scale = 1.0 / draws.len() as f64;
    let mut total = 0.0;
    for dr in draws {
        let x = &class.images[dr.image];
        let z_t = mix(x, &dr.eps, dr.alpha_bar)?;
        let fw = forward(bank, &z_t, &sources, dr.alpha_bar, &Hooks::default())?;
        let cg = cross_backward(bank, &fw, &sources, &dr.eps);
        total += cg.loss * scale;
        let Some(g) = grad.as_deref_mut() else { continue };
        let (sa, om) = (dr.alpha_bar.sqrt(), 1.0 - dr.alpha_bar);
        let keys = fw.keys;
        let mut xa = vec![0.0; r];
        let mut gb = vec![0.0; r];
        let mut gk = vec![0.0; d];
        for i in 0..np {
            let q = &fw.q2[i * d..(i + 1) * d];
            let gp = &cg.g_phi[i * d..(i + 1) * d];
            for n in 0..keys {
                let off = (n * np + i) * d;
                let xn = &class.patches[off..off + d];
                let kn = &class.keys[off..off + d];
                let gl = cg.g_evidence[i * keys + n] * scale;
                let mw = fw.m2[i * keys + n] * scale;
                for c in 0..d {
                    gk[c] = gl * (sa * q[c] - dr.alpha_bar * kn[c]) / om;
                }
                // keys: k = xW + (xA_K)B_Kᵀ ; values: v = xW_V + (xA_V)B_Vᵀ
                for (which, (a, b), gvec) in [(0, (&adapter.a_k, &adapter.b_k), &gk[..]), (2, (&adapter.a_v, &adapter.b_v), gp)] {
                    let coef = if which == 0 { 1.0 } else { mw };
                    if coef == 0.0 {
                        continue;
                    }
                    for j in 0..r {
                        xa[j] = (0..d).map(|c| xn[c] * a.get(c, j)).sum();
                        gb[j] = (0..d).map(|c| gvec[c] * b.get(c, j)).sum::<f64>() * coef;
                    }
                    let (ga, gbm) = g[which * block..(which + 2) * block].split_at_mut(block);
                    for c in 0..d {
                        for j in 0..r {
                            ga[c * r + j] += xn[c] * gb[j];
                            gbm[c * r + j] += gvec[c] * coef * xa[j];
                        }
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Registers `renders` under a new adapter token and fits low-rank
/// corrections of the cross-attention key and value projections by Adam on
/// the denoising loss over those renders. Returns the new bank version.
pub fn finetune_adapter(
    bank: &ExemplarBank,
    renders: &[Image],
    id: &str,
    schedule: &NoiseSchedule,
    config: &FinetuneConfig,
) -> Result<(ExemplarBank, AdapterReport)> {
    let exemplars = bank.register_images(id, renders.to_vec())?;
    let d = bank.dim();
    let r = bank.config.adapter_rank;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = 1.0 / (d as f64).sqrt();
    let rand_mat = |rng: &mut ChaCha8Rng| Mat::from_vec(d, r, (0..d * r).map(|_| init * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect::<Vec<f64>>());
    let a_k = rand_mat(&mut rng);
    let a_v = rand_mat(&mut rng);
    let mut adapter = Adapter {
        id: id.to_string(),
        exemplars,
        a_k,
        b_k: Mat::zeros(d, r),
        a_v,
        b_v: Mat::zeros(d, r),
        losses: Vec::new(),
    };
    let mut current = bank.with_adapter(adapter.clone());
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_e7a1);
    let eval = draws(&mut eval_rng, config.eval_draws.max(1), renders.len(), schedule, config, bank.width(), bank.height())?;
    let initial_eval_loss = loss_and_grad(&current, id, &eval, None)?;

    let block = d * r;
    let mut params = vec![0.0; 4 * block];
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), params.len());
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let batch = draws(&mut rng, config.batch.max(1), renders.len(), schedule, config, bank.width(), bank.height())?;
        let mut grad = vec![0.0; params.len()];
        losses.push(loss_and_grad(&current, id, &batch, Some(&mut grad))?);
        for (k, m) in [&adapter.a_k, &adapter.b_k, &adapter.a_v, &adapter.b_v].iter().enumerate() {
            params[k * block..(k + 1) * block].copy_from_slice(&m.data);
        }
        adam.step(&mut params, &grad);
        for (k, m) in [&mut adapter.a_k, &mut adapter.b_k, &mut adapter.a_v, &mut adapter.b_v].into_iter().enumerate() {
            m.data.copy_from_slice(&params[k * block..(k + 1) * block]);
        }
        current = bank.with_adapter(adapter.clone());
    }
    let final_eval_loss = loss_and_grad(&current, id, &eval, None)?;
    adapter.losses = losses.clone();
    let current = bank.with_adapter(adapter);
    Ok((
        current,
        AdapterReport {
            id: id.to_string(),
            losses,
            initial_eval_loss,
            final_eval_loss,
        },
    ))
}
