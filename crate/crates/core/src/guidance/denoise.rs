use super::bank::{Adapter, ExemplarBank, ExemplarClass};
use super::{dot, softmax_in_place, Mat, NoiseSchedule, PromptToken};
use crate::error::{Error, Result};
use crate::image::Image;

pub const SELF_ATTENTION: usize = 0;
pub const CROSS_ATTENTION: usize = 1;

/// Activations of one attention layer.
///
/// For self-attention every row attends to all `m.cols` patch keys. For the
/// cross-attention layer row `i` attends only to its own block of `m.cols`
/// keys, `k.rows = m.rows · m.cols`: the patches at the same grid position
/// in every exemplar of the token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub m: Mat,
    pub phi: Mat,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub layers: [AttentionLayer; 2],
}

/// Directives applied inside a denoiser call, per layer index.
#[derive(Debug, Clone, Default)]
pub struct Hooks {
    pub capture: bool,
    /// Replaces a layer's `φ` before it propagates.
    pub inject: [Option<Mat>; 2],
    /// Zeroes the attention rows of patches whose mask entry is `false`
    /// before `φ = M·V`.
    pub row_mask: [Option<Vec<bool>>; 2],
    /// Weighted activations of other branches mixed into a layer's own `φ`
    /// by [`blend_activations`]; applied after masking, before injection.
    pub blend: [Option<Vec<(Mat, f64)>>; 2],
}

impl Hooks {
    pub fn capture() -> Self {
        Hooks {
            capture: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub eps_hat: Image,
    pub x0_hat: Image,
    pub alpha_bar: f64,
    pub activations: Option<ActivationSet>,
}

/// One block of keys in the cross-attention layer.
pub(crate) struct KeySource<'a> {
    pub class: &'a ExemplarClass,
    pub bias: f64,
    pub adapter: Option<&'a Adapter>,
}

pub(crate) fn resolve<'a>(bank: &'a ExemplarBank, token: &PromptToken) -> Result<Vec<KeySource<'a>>> {
    token.validate()?;
    let sources: Vec<KeySource> = match token {
        PromptToken::Class { name } => vec![KeySource {
            class: &bank.classes()[bank.class_index(name)?],
            bias: 0.0,
            adapter: None,
        }],
        PromptToken::Null => bank
            .classes()
            .iter()
            .map(|class| KeySource {
                class,
                bias: 0.0,
                adapter: None,
            })
            .chain(bank.adapters().iter().map(|a| KeySource {
                class: &a.exemplars,
                bias: 0.0,
                adapter: Some(a),
            }))
            .collect(),
        PromptToken::Inverted { classes, weights } => {
            let mut out = Vec::new();
            for (name, &w) in classes.iter().zip(weights) {
                let class = &bank.classes()[bank.class_index(name)?];
                if w > 0.0 {
                    out.push(KeySource {
                        class,
                        bias: w.ln(),
                        adapter: None,
                    });
                }
            }
            out
        }
        PromptToken::Adapter { id } => {
            let a = bank.adapter(id)?;
            vec![KeySource {
                class: &a.exemplars,
                bias: 0.0,
                adapter: Some(a),
            }]
        }
    };
    if sources.iter().all(|s| s.class.is_empty()) {
        return Err(Error::EmptyExemplarSet);
    }
    Ok(sources)
}

/// Intermediate values of one forward pass, kept for analytic gradients.
pub(crate) struct Forward {
    pub alpha_bar: f64,
    pub z: Vec<f64>,
    pub q2: Vec<f64>,
    /// Cross-attention weights, `patches × keys`.
    pub m2: Vec<f64>,
    pub keys: usize,
    /// Source index of each key within a row block.
    pub key_source: Vec<usize>,
    pub x0: Vec<f64>,
    pub activations: Option<ActivationSet>,
}

pub(crate) fn forward(
    bank: &ExemplarBank,
    z_t: &Image,
    sources: &[KeySource],
    alpha_bar: f64,
    hooks: &Hooks,
) -> Result<Forward> {
    if z_t.shape() != (bank.width(), bank.height()) {
        return Err(Error::ShapeMismatch {
            class: "denoiser input".into(),
            expected: (bank.width(), bank.height()),
            actual: z_t.shape(),
        });
    }
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha_bar {alpha_bar} outside (0, 1)")));
    }
    let d = bank.dim();
    let np = bank.patch_count();
    for (l, m) in hooks.row_mask.iter().enumerate() {
        if let Some(m) = m {
            crate::error::check_len(if l == 0 { "self-attention mask" } else { "cross-attention mask" }, np, m.len())?;
        }
    }
    for inj in hooks.inject.iter().flatten().chain(hooks.blend.iter().flatten().flat_map(|b| b.iter().map(|(m, _)| m))) {
        if (inj.rows, inj.cols) != (np, d) {
            return Err(Error::InvalidArgument(format!(
                "injected activation is {}x{}, expected {np}x{d}",
                inj.rows, inj.cols
            )));
        }
    }

    let z = bank.to_patches(z_t);

    // self-attention over noisy patches
    let u: Vec<f64> = z.iter().zip(bank.positional()).map(|(a, b)| a + b).collect();
    let q1 = Mat::project_rows(&u, d, bank.w_qk());
    let v1 = Mat::project_rows(&z, d, bank.w_v());
    let scale = 1.0 / (d as f64).sqrt();
    let mut m1 = vec![0.0; np * np];
    for i in 0..np {
        let qi = &q1[i * d..(i + 1) * d];
        let row = &mut m1[i * np..(i + 1) * np];
        for (j, r) in row.iter_mut().enumerate() {
            *r = scale * dot(qi, &q1[j * d..(j + 1) * d]);
        }
        softmax_in_place(row);
    }
    let m1_raw = hooks.capture.then(|| m1.clone());
    if let Some(mask) = &hooks.row_mask[SELF_ATTENTION] {
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                m1[i * np..(i + 1) * np].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    let mut phi1 = vec![0.0; np * d];
    for i in 0..np {
        for j in 0..np {
            let w = m1[i * np + j];
            if w == 0.0 {
                continue;
            }
            for c in 0..d {
                phi1[i * d + c] += w * v1[j * d + c];
            }
        }
    }
    let phi1_own = hooks.capture.then(|| phi1.clone());
    if let Some(branches) = &hooks.blend[SELF_ATTENTION] {
        phi1 = blend_activations(&Mat::from_vec(np, d, phi1), branches)?.data;
    }
    if let Some(inj) = &hooks.inject[SELF_ATTENTION] {
        phi1.copy_from_slice(&inj.data);
    }
    let r1 = Mat::project_rows_t(&phi1, bank.w_v());
    let gamma = bank.config.gamma;
    let h: Vec<f64> = z.iter().zip(&r1).map(|(a, b)| (1.0 - gamma) * a + gamma * b).collect();

    // cross-attention to the token's exemplar patches at the same position
    let q2 = Mat::project_rows(&h, d, bank.w_qk());
    let keys: usize = sources.iter().map(|s| s.class.len()).sum();
    let mut key_source = Vec::with_capacity(keys);
    for (s, src) in sources.iter().enumerate() {
        key_source.extend(std::iter::repeat_n(s, src.class.len()));
    }
    let (sa, one_minus) = (alpha_bar.sqrt(), 1.0 - alpha_bar);
    let mut m2 = vec![0.0; np * keys];
    let mut phi2 = vec![0.0; np * d];
    let mut k_cap = hooks.capture.then(|| Vec::with_capacity(np * keys * d));
    let mut v_cap = hooks.capture.then(|| Vec::with_capacity(np * keys * d));
    // per-position evidence, then pooled over the patch neighborhood
    let mut evidence = vec![0.0; np * keys];
    for i in 0..np {
        let qi = &q2[i * d..(i + 1) * d];
        let row = &mut evidence[i * keys..(i + 1) * keys];
        let mut col = 0;
        for src in sources {
            for n in 0..src.class.len() {
                let k = &src.class.keys[(n * np + i) * d..][..d];
                row[col] = (2.0 * sa * dot(qi, k) - alpha_bar * dot(k, k)) / (2.0 * one_minus);
                if let (Some(kc), Some(vc)) = (&mut k_cap, &mut v_cap) {
                    kc.extend_from_slice(k);
                    vc.extend_from_slice(&src.class.values[(n * np + i) * d..][..d]);
                }
                col += 1;
            }
        }
    }
    pool_rows(&evidence, &mut m2, keys, bank.grid(), bank.config.context_radius);
    for i in 0..np {
        let row = &mut m2[i * keys..(i + 1) * keys];
        for (c, &s) in key_source.iter().enumerate() {
            row[c] += sources[s].bias;
        }
        softmax_in_place(row);
    }
    let m2_raw = hooks.capture.then(|| m2.clone());
    if let Some(mask) = &hooks.row_mask[CROSS_ATTENTION] {
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                m2[i * keys..(i + 1) * keys].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    for i in 0..np {
        let mut col = 0;
        for src in sources {
            for n in 0..src.class.len() {
                let w = m2[i * keys + col];
                col += 1;
                if w == 0.0 {
                    continue;
                }
                let v = &src.class.values[(n * np + i) * d..][..d];
                for c in 0..d {
                    phi2[i * d + c] += w * v[c];
                }
            }
        }
    }
    let phi2_own = hooks.capture.then(|| phi2.clone());
    if let Some(branches) = &hooks.blend[CROSS_ATTENTION] {
        phi2 = blend_activations(&Mat::from_vec(np, d, phi2), branches)?.data;
    }
    if let Some(inj) = &hooks.inject[CROSS_ATTENTION] {
        phi2.copy_from_slice(&inj.data);
    }
    let x0 = Mat::project_rows_t(&phi2, bank.w_v());

    let activations = if hooks.capture {
        Some(ActivationSet {
            layers: [
                AttentionLayer {
                    q: Mat::from_vec(np, d, q1.clone()),
                    k: Mat::from_vec(np, d, q1),
                    v: Mat::from_vec(np, d, v1),
                    m: Mat::from_vec(np, np, m1_raw.unwrap()),
                    phi: Mat::from_vec(np, d, phi1_own.unwrap()),
                    dim: d,
                },
                AttentionLayer {
                    q: Mat::from_vec(np, d, q2.clone()),
                    k: Mat::from_vec(np * keys, d, k_cap.unwrap()),
                    v: Mat::from_vec(np * keys, d, v_cap.unwrap()),
                    m: Mat::from_vec(np, keys, m2_raw.unwrap()),
                    phi: Mat::from_vec(np, d, phi2_own.unwrap()),
                    dim: d,
                },
            ],
        })
    } else {
        None
    };
    Ok(Forward {
        alpha_bar,
        z,
        q2,
        m2,
        keys,
        key_source,
        x0,
        activations,
    })
}

/// Gradients of the mean squared noise-prediction error of one forward pass.
pub(crate) struct CrossGrad {
    pub loss: f64,
    /// `∂L/∂φ` of the cross-attention layer, `patches × dim`.
    pub g_phi: Vec<f64>,
    /// `∂L/∂logit` of the pooled logits, `patches × keys`.
    pub g_logits: Vec<f64>,
    /// `∂L/∂evidence` of the per-position logits before pooling.
    pub g_evidence: Vec<f64>,
}

pub(crate) fn cross_backward(bank: &ExemplarBank, fw: &Forward, sources: &[KeySource], eps: &Image) -> CrossGrad {
    let d = bank.dim();
    let np = bank.patch_count();
    let e = bank.to_patches(eps);
    let n = e.len() as f64;
    let (sa, sb) = (fw.alpha_bar.sqrt(), (1.0 - fw.alpha_bar).sqrt());
    let mut loss = 0.0;
    let mut g_x = vec![0.0; e.len()];
    for k in 0..e.len() {
        let r = (fw.z[k] - sa * fw.x0[k]) / sb - e[k];
        loss += r * r / n;
        g_x[k] = -sa / sb * 2.0 * r / n;
    }
    let g_phi = Mat::project_rows(&g_x, d, bank.w_v());
    let keys = fw.keys;
    let mut g_logits = vec![0.0; np * keys];
    let mut gm = vec![0.0; keys];
    for i in 0..np {
        let gp = &g_phi[i * d..(i + 1) * d];
        let m = &fw.m2[i * keys..(i + 1) * keys];
        let mut col = 0;
        for src in sources {
            for n in 0..src.class.len() {
                gm[col] = dot(gp, &src.class.values[(n * np + i) * d..][..d]);
                col += 1;
            }
        }
        let mean: f64 = m.iter().zip(&gm).map(|(a, b)| a * b).sum();
        for c in 0..keys {
            g_logits[i * keys + c] = m[c] * (gm[c] - mean);
        }
    }
    let mut g_evidence = vec![0.0; np * keys];
    pool_rows(&g_logits, &mut g_evidence, keys, bank.grid(), bank.config.context_radius);
    CrossGrad {
        loss,
        g_phi,
        g_logits,
        g_evidence,
    }
}

/// `out[i] = Σ in[j]` over grid cells `j` within Chebyshev distance
/// `radius` of cell `i`, row-wise for `cols` columns. Self-adjoint.
pub(crate) fn pool_rows(input: &[f64], out: &mut [f64], cols: usize, grid: (usize, usize), radius: usize) {
    let (gw, gh) = grid;
    out.iter_mut().for_each(|x| *x = 0.0);
    for gy in 0..gh {
        for gx in 0..gw {
            let i = gy * gw + gx;
            for jy in gy.saturating_sub(radius)..=(gy + radius).min(gh - 1) {
                for jx in gx.saturating_sub(radius)..=(gx + radius).min(gw - 1) {
                    let j = jy * gw + jx;
                    for c in 0..cols {
                        out[i * cols + c] += input[j * cols + c];
                    }
                }
            }
        }
    }
}

/// `Σ_j w_j φ_j + (1 − Σ_j w_j)·own`, summing the weighted branch terms
/// first. Zero-weight terms are skipped, so a weight of one reproduces that
/// branch bitwise and zero weights leave `own` untouched.
pub fn blend_activations(own: &Mat, branches: &[(Mat, f64)]) -> Result<Mat> {
    let mut total = 0.0;
    for (phi, w) in branches {
        if (phi.rows, phi.cols) != (own.rows, own.cols) {
            return Err(Error::InvalidArgument(format!(
                "blended activation is {}x{}, expected {}x{}",
                phi.rows, phi.cols, own.rows, own.cols
            )));
        }
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!("blend weight {w} must be finite and nonnegative")));
        }
        total += w;
    }
    if total > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!("blend weights sum to {total}, more than 1")));
    }
    let mut out: Option<Mat> = None;
    for (phi, w) in branches.iter().filter(|(_, w)| *w > 0.0) {
        out = Some(match out {
            None => phi.scaled(*w),
            Some(acc) => acc.add(&phi.scaled(*w)),
        });
    }
    let Some(acc) = out else {
        return Ok(own.clone());
    };
    let rest = 1.0 - total;
    if rest.abs() <= 1e-12 {
        return Ok(acc);
    }
    Ok(acc.add(&own.scaled(rest)))
}

/// Evaluates the denoiser at continuous time `t`.
pub fn denoise(
    bank: &ExemplarBank,
    z_t: &Image,
    token: &PromptToken,
    t: f64,
    schedule: &NoiseSchedule,
    hooks: &Hooks,
) -> Result<DenoiseOutput> {
    denoise_with_alpha(bank, z_t, token, schedule.alpha_bar(t)?, hooks)
}

pub fn denoise_with_alpha(
    bank: &ExemplarBank,
    z_t: &Image,
    token: &PromptToken,
    alpha_bar: f64,
    hooks: &Hooks,
) -> Result<DenoiseOutput> {
    let sources = resolve(bank, token)?;
    let fw = forward(bank, z_t, &sources, alpha_bar, hooks)?;
    Ok(finish(bank, z_t, fw))
}

pub(crate) fn finish(bank: &ExemplarBank, z_t: &Image, fw: Forward) -> DenoiseOutput {
    let x0_hat = bank.from_patches(&fw.x0);
    let (sa, sb) = (fw.alpha_bar.sqrt(), (1.0 - fw.alpha_bar).sqrt());
    let eps_hat = Image::from_vec(
        z_t.width(),
        z_t.height(),
        z_t.data()
            .iter()
            .zip(x0_hat.data())
            .map(|(z, x)| (z - sa * x) / sb)
            .collect(),
    )
    .expect("same shape");
    DenoiseOutput {
        eps_hat,
        x0_hat,
        alpha_bar: fw.alpha_bar,
        activations: fw.activations,
    }
}
