//! Score distillation over a Jacobian field with blended multi-target
//! guidance.
//!
//! Every iteration renders the current mesh from a few sampled views, noises
//! each render once, runs one denoiser branch per target (capturing its
//! attention activations) and a null-conditioned blending branch into which
//! the weighted target activations are mixed. Classifier-free guidance of the
//! blended prediction against the null prediction yields the noise residual,
//! which is pushed through the renderer and the Poisson solve onto the
//! per-face Jacobians.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    add_noise, denoise, sample_noise, sample_timestep, ActivationSet, ExemplarBank, Hooks, Mat, NoiseSchedule,
    PromptToken, CROSS_ATTENTION, SELF_ATTENTION,
};
use crate::image::Image;
use crate::localize::{
    backproject_roi, extract_control_attention, patch_mask, rasterize_roi_mask, stabilize_low_weight,
    stabilizer_triggered, RoiMap, ROI_THRESHOLD,
};
use crate::mesh::{centroid, poisson_solve, Anchor, GradientOperator, JacobianField, Mesh};
use crate::optim::{Adam, AdamConfig};
use crate::render::{sample_cameras, Camera, CameraRig, RenderSettings, ViewRender};

pub use crate::guidance::blend_activations;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 100.0;
/// Optimization aborts when the SDS gradient norm exceeds this. The
/// regularizer's subgradient is bounded by `α_reg·√faces` and is not
/// checked, so a very stiff regularizer does not count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One concept the mesh is pulled toward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendTarget {
    pub token: PromptToken,
    pub weight: f64,
    /// Control vertices confining where this target may act.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<Vec<usize>>,
}

impl BlendTarget {
    pub fn new(token: PromptToken, weight: f64) -> Self {
        BlendTarget {
            token,
            weight,
            control: None,
        }
    }
}

/// SDS weighting `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepWeight {
    #[default]
    Constant,
    /// `w(t) = 1 − ᾱ_t`.
    NoiseVariance,
}

impl TimestepWeight {
    pub fn at(self, alpha_bar: f64) -> f64 {
        match self {
            TimestepWeight::Constant => 1.0,
            TimestepWeight::NoiseVariance => 1.0 - alpha_bar,
        }
    }
}

/// Everything that defines one deformation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendSpec {
    pub targets: Vec<BlendTarget>,
    pub guidance_scale: f64,
    pub reg_weight: f64,
    pub iterations: usize,
    /// Views rendered per iteration.
    pub views: usize,
    pub seed: u64,
    pub modified_cfg: bool,
    pub optimizer: AdamConfig,
    pub t_range: [f64; 2],
    pub timestep_weight: TimestepWeight,
    pub rig: CameraRig,
    pub render: RenderSettings,
    pub roi_threshold: f64,
    /// Fine-tuned adapter token used to stabilize lopsided localized blends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stabilizer: Option<PromptToken>,
}

impl BlendSpec {
    /// The tested desk-scale profile: 400 iterations of 4 views at 32×32.
    pub fn desk(targets: Vec<BlendTarget>) -> Self {
        BlendSpec {
            targets,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            reg_weight: 3.0,
            iterations: 400,
            views: 4,
            seed: 0,
            modified_cfg: false,
            optimizer: AdamConfig {
                lr: 0.025,
                beta1: 0.9,
                beta2: 0.99,
                eps: 1e-8,
            },
            t_range: [0.02, 0.98],
            timestep_weight: TimestepWeight::Constant,
            rig: CameraRig::default(),
            render: RenderSettings::default(),
            roi_threshold: ROI_THRESHOLD,
            stabilizer: None,
        }
    }

    /// 2400 iterations of 16 views.
    pub fn full(targets: Vec<BlendTarget>) -> Self {
        BlendSpec {
            iterations: 2400,
            views: 16,
            ..Self::desk(targets)
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.targets.iter().map(|t| t.weight).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for (i, t) in self.targets.iter().enumerate() {
            if !(t.weight >= 0.0 && t.weight.is_finite()) {
                return Err(Error::config(
                    format!("targets[{i}].weight"),
                    format!("weight {} must be finite and nonnegative", t.weight),
                ));
            }
            sum += t.weight;
            t.token
                .validate()
                .map_err(|e| Error::config(format!("targets[{i}].token"), e.to_string()))?;
            if let Some(c) = &t.control {
                if c.is_empty() {
                    return Err(Error::config(format!("targets[{i}].control"), "control vertex list is empty"));
                }
            }
        }
        if sum > 1.0 + 1e-9 {
            return Err(Error::config("targets.weight", format!("weights sum to {sum}, more than 1")));
        }
        if self.views == 0 {
            return Err(Error::config("views", "at least one view per iteration is required"));
        }
        let [lo, hi] = self.t_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::config("t_range", format!("[{lo}, {hi}] must lie inside (0, 1)")));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config("guidance_scale", "must be finite and nonnegative"));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::config("reg_weight", "must be finite and nonnegative"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.roi_threshold) {
            return Err(Error::config("roi_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `w·‖ε̂ − ε‖²`.
pub fn diffusion_loss(eps_hat: &Image, eps: &Image, weight: f64) -> Result<f64> {
    crate::error::check_len("noise prediction", eps.len(), eps_hat.len())?;
    Ok(weight * eps_hat.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
}

fn combine(lead: &Image, text: &Image, null: &Image, scale: f64) -> Result<Image> {
    crate::error::check_len("guidance inputs", lead.len(), text.len())?;
    crate::error::check_len("guidance inputs", lead.len(), null.len())?;
    let data = lead
        .data()
        .iter()
        .zip(text.data().iter().zip(null.data()))
        .map(|(l, (t, n))| l + scale * (t - n))
        .collect();
    Image::from_vec(lead.width(), lead.height(), data)
}

/// Classifier-free guidance `ε̂_text + α(ε̂_text − ε̂_null)`.
pub fn cfg_combine(eps_text: &Image, eps_null: &Image, scale: f64) -> Result<Image> {
    combine(eps_text, eps_text, eps_null, scale)
}

/// Guidance with the sampled noise as the leading term,
/// `ε + α(ε̂_text − ε̂_null)`, so equal branches give exactly `ε`.
pub fn modified_cfg(eps: &Image, eps_text: &Image, eps_null: &Image, scale: f64) -> Result<Image> {
    combine(eps, eps_text, eps_null, scale)
}

/// `α Σ_i ‖J_i − I‖_F` and its subgradient (zero at `J_i = I`).
pub fn jacobian_regularizer_gradient(field: &JacobianField, weight: f64) -> (f64, JacobianField) {
    let mut loss = 0.0;
    let per_face = field
        .per_face
        .iter()
        .map(|j| {
            let d = j - Matrix3::identity();
            let n = d.norm();
            loss += n;
            if n > 0.0 {
                d * (weight / n)
            } else {
                Matrix3::zeros()
            }
        })
        .collect();
    (weight * loss, JacobianField { per_face })
}

/// One noised view's guidance residual.
#[derive(Debug, Clone)]
pub struct SdsDraw {
    pub eps_hat: Image,
    pub eps: Image,
    pub weight: f64,
    pub alpha_bar: f64,
}

/// Per-vertex gradient of `Σ_views ⟨w(ε̂ − ε), z_t⟩` with the residual held
/// fixed.
pub fn sds_vertex_gradient(draws: &[SdsDraw], views: &[ViewRender]) -> Result<Vec<Vector3<f64>>> {
    crate::error::check_len("SDS views", draws.len(), views.len())?;
    let per_view: Vec<Vec<Vector3<f64>>> = draws
        .par_iter()
        .zip(views)
        .map(|(d, v)| {
            crate::error::check_len("SDS residual", d.eps.len(), d.eps_hat.len())?;
            let s = d.weight * d.alpha_bar.sqrt();
            let data = d.eps_hat.data().iter().zip(d.eps.data()).map(|(a, b)| s * (a - b)).collect();
            v.backward(&Image::from_vec(d.eps.width(), d.eps.height(), data)?)
        })
        .collect::<Result<_>>()?;
    let n = per_view.first().map_or(0, |g| g.len());
    let mut total = vec![Vector3::zeros(); n];
    for g in &per_view {
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    Ok(total)
}

/// SDS gradient on the Jacobians: the fixed residual propagated through the
/// noising, the renderer and the adjoint Poisson solve.
pub fn sds_gradient(draws: &[SdsDraw], views: &[ViewRender], operator: &GradientOperator) -> Result<JacobianField> {
    operator.adjoint(&sds_vertex_gradient(draws, views)?)
}

/// Per-iteration log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean weighted diffusion loss of the guided prediction over views.
    pub loss: f64,
    pub reg_loss: f64,
    pub sds_grad_norm: f64,
    pub grad_norm: f64,
}

/// Gradients of one iteration, kept separate for inspection.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub sds: JacobianField,
    pub reg: JacobianField,
    pub total: JacobianField,
    /// Guided noise prediction per view.
    pub eps_hat: Vec<Image>,
    pub loss: f64,
    pub reg_loss: f64,
}

/// Output of [`optimize_deformation`].
#[derive(Debug, Clone)]
pub struct DeformResult {
    pub vertices: Vec<Point3<f64>>,
    pub field: JacobianField,
    pub history: Vec<IterationRecord>,
    /// Accumulated region of interest of each target with control vertices.
    pub roi: Vec<Option<RoiMap>>,
    pub anchor: Anchor,
}

/// Optimizer state of a running deformation.
pub struct Session<'a> {
    mesh: &'a Mesh,
    spec: BlendSpec,
    bank: &'a ExemplarBank,
    schedule: &'a NoiseSchedule,
    operator: GradientOperator,
    anchor: Anchor,
    field: JacobianField,
    params: Vec<f64>,
    adam: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
    vertices: Vec<Point3<f64>>,
    history: Vec<IterationRecord>,
    roi: Vec<Option<RoiMap>>,
    apply_masks: bool,
}

/// What one view contributes to an iteration.
struct ViewOutcome {
    view: ViewRender,
    draw: SdsDraw,
    loss: f64,
    /// `R_m` per target (only for targets with control vertices).
    roi: Vec<Option<Vec<f64>>>,
}

impl<'a> Session<'a> {
    /// Starts at the identity field. With `apply_masks`, targets carrying
    /// control vertices have their cross-attention confined to the
    /// rasterized region of interest.
    pub fn new(
        mesh: &'a Mesh,
        spec: &BlendSpec,
        bank: &'a ExemplarBank,
        schedule: &'a NoiseSchedule,
        apply_masks: bool,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.render.output != bank.width() || spec.render.output != bank.height() {
            return Err(Error::InvalidArgument(format!(
                "render output {} does not match the bank's {}x{} exemplars",
                spec.render.output,
                bank.width(),
                bank.height()
            )));
        }
        for (i, t) in spec.targets.iter().enumerate() {
            if let Some(c) = &t.control {
                if let Some(&v) = c.iter().find(|&&v| v >= mesh.vertex_count()) {
                    return Err(Error::config(
                        format!("targets[{i}].control"),
                        format!("vertex {v} out of range ({} vertices)", mesh.vertex_count()),
                    ));
                }
            }
        }
        let operator = GradientOperator::new(mesh)?;
        let anchor = operator.source_anchor();
        let field = JacobianField::identity(mesh.face_count());
        let params = flatten(&field);
        let roi = spec
            .targets
            .iter()
            .map(|t| t.control.as_ref().map(|_| RoiMap::new(mesh.vertex_count(), spec.roi_threshold)))
            .collect();
        Ok(Session {
            mesh,
            adam: Adam::new(spec.optimizer, params.len()),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            spec: spec.clone(),
            bank,
            schedule,
            operator,
            anchor,
            field,
            params,
            iteration: 0,
            vertices: mesh.vertices().to_vec(),
            history: Vec::new(),
            roi,
            apply_masks,
        })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn field(&self) -> &JacobianField {
        &self.field
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn roi(&self) -> &[Option<RoiMap>] {
        &self.roi
    }

    /// Draws this iteration's views and noise, evaluates every branch and
    /// returns the gradients without updating the parameters. Region-of-
    /// interest accumulators are updated.
    pub fn compute_step(&mut self) -> Result<StepGradients> {
        let spec = &self.spec;
        let center = centroid(&self.vertices);
        let cam_seed: u64 = self.rng.random();
        let cameras = sample_cameras(spec.views, cam_seed, &spec.rig, center)?;
        let draws: Vec<(f64, Image)> = (0..spec.views)
            .map(|_| {
                let t = sample_timestep(&mut self.rng, spec.t_range);
                (t, sample_noise(&mut self.rng, spec.render.output, spec.render.output))
            })
            .collect();

        let masks: Vec<Option<Vec<bool>>> = self
            .roi
            .iter()
            .map(|r| r.as_ref().filter(|_| self.apply_masks).map(|r| r.mask()))
            .collect();
        let outcomes: Vec<ViewOutcome> = cameras
            .par_iter()
            .zip(&draws)
            .map(|(cam, (t, eps))| self.view_outcome(cam, *t, eps, &masks))
            .collect::<Result<_>>()?;

        let grid = self.bank.grid();
        for o in &outcomes {
            for (state, r) in self.roi.iter_mut().zip(&o.roi) {
                if let (Some(state), Some(r)) = (state.as_mut(), r) {
                    backproject_roi(r, grid, &o.view.rendered.pixel_map, state)?;
                }
            }
        }

        let sds_draws: Vec<SdsDraw> = outcomes.iter().map(|o| o.draw.clone()).collect();
        let views: Vec<ViewRender> = outcomes.iter().map(|o| o.view.clone()).collect();
        let sds = sds_gradient(&sds_draws, &views, &self.operator)?;
        let (reg_loss, reg) = jacobian_regularizer_gradient(&self.field, self.spec.reg_weight);
        let mut total = sds.clone();
        total.add_assign(&reg);
        let loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / outcomes.len() as f64;
        Ok(StepGradients {
            sds,
            reg,
            total,
            eps_hat: outcomes.into_iter().map(|o| o.draw.eps_hat).collect(),
            loss,
            reg_loss,
        })
    }

    /// Applies one Adam update from `grads` and re-solves the vertices.
    pub fn apply(&mut self, grads: &StepGradients) -> Result<IterationRecord> {
        let grad_norm = grads.total.norm();
        let sds_norm = grads.sds.norm();
        if !(sds_norm <= DIVERGENCE_LIMIT) || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                norm: if grad_norm.is_finite() { sds_norm } else { grad_norm },
            });
        }
        self.adam.step(&mut self.params, &flatten(&grads.total));
        self.field = unflatten(&self.params);
        self.vertices = poisson_solve(&self.operator, &self.field, self.anchor)?;
        let record = IterationRecord {
            iteration: self.iteration,
            loss: grads.loss,
            reg_loss: grads.reg_loss,
            sds_grad_norm: sds_norm,
            grad_norm,
        };
        self.history.push(record.clone());
        self.iteration += 1;
        Ok(record)
    }

    pub fn step(&mut self) -> Result<IterationRecord> {
        let g = self.compute_step()?;
        self.apply(&g)
    }

    pub fn finish(self) -> DeformResult {
        DeformResult {
            vertices: self.vertices,
            field: self.field,
            history: self.history,
            roi: self.roi,
            anchor: self.anchor,
        }
    }

    fn view_outcome(&self, camera: &Camera, t: f64, eps: &Image, masks: &[Option<Vec<bool>>]) -> Result<ViewOutcome> {
        let spec = &self.spec;
        let view = ViewRender::new(self.mesh, &self.vertices, camera, &spec.render)?;
        let z_t = add_noise(&view.image, eps, t, self.schedule)?;
        let alpha_bar = self.schedule.alpha_bar(t)?;
        let grid = self.bank.grid();

        let raster_cam = camera.with_resolution(spec.render.raster, spec.render.raster);
        let mut regions: Vec<Option<Vec<bool>>> = Vec::with_capacity(masks.len());
        for m in masks {
            regions.push(match m {
                Some(m) => Some(patch_mask(
                    &rasterize_roi_mask(self.mesh, &self.vertices, m, &raster_cam)?,
                    grid,
                )?),
                None => None,
            });
        }

        let mut acts: Vec<ActivationSet> = Vec::with_capacity(spec.targets.len());
        for (target, region) in spec.targets.iter().zip(&regions) {
            let mut hooks = Hooks::capture();
            hooks.row_mask[CROSS_ATTENTION] = region.clone();
            let out = denoise(self.bank, &z_t, &target.token, t, self.schedule, &hooks)?;
            acts.push(out.activations.expect("captured"));
        }

        let weights = spec.weights();
        let localized: Vec<usize> = (0..regions.len()).filter(|&i| regions[i].is_some()).collect();
        if localized.len() >= 2 && stabilizer_triggered(&weights) {
            let low = *localized
                .iter()
                .min_by(|&&a, &&b| weights[a].total_cmp(&weights[b]))
                .expect("nonempty");
            let adapter = match &spec.stabilizer {
                Some(token) => Some(
                    denoise(self.bank, &z_t, token, t, self.schedule, &Hooks::capture())?
                        .activations
                        .expect("captured"),
                ),
                None => None,
            };
            let region = regions[low].as_ref().expect("localized");
            acts[low] = stabilize_low_weight(&acts[low], region, adapter.as_ref(), &weights)?;
        }

        let roi = spec
            .targets
            .iter()
            .zip(&acts)
            .map(|(target, a)| {
                target
                    .control
                    .as_ref()
                    .map(|c| extract_control_attention(a, grid, &view.rendered.pixel_map, c))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;

        let mut blend_hooks = Hooks::default();
        for layer in [SELF_ATTENTION, CROSS_ATTENTION] {
            blend_hooks.blend[layer] = Some(
                acts.iter()
                    .zip(&weights)
                    .map(|(a, &w)| (a.layers[layer].phi.clone(), w))
                    .collect::<Vec<(Mat, f64)>>(),
            );
        }
        let blended = denoise(self.bank, &z_t, &PromptToken::Null, t, self.schedule, &blend_hooks)?;
        let null = denoise(self.bank, &z_t, &PromptToken::Null, t, self.schedule, &Hooks::default())?;
        let eps_hat = if spec.modified_cfg {
            modified_cfg(eps, &blended.eps_hat, &null.eps_hat, spec.guidance_scale)?
        } else {
            cfg_combine(&blended.eps_hat, &null.eps_hat, spec.guidance_scale)?
        };
        let weight = spec.timestep_weight.at(alpha_bar);
        let loss = diffusion_loss(&eps_hat, eps, weight)?;
        Ok(ViewOutcome {
            view,
            draw: SdsDraw {
                eps_hat,
                eps: eps.clone(),
                weight,
                alpha_bar,
            },
            loss,
            roi,
        })
    }
}

fn flatten(field: &JacobianField) -> Vec<f64> {
    field.per_face.iter().flat_map(|m| m.iter().copied()).collect()
}

fn unflatten(params: &[f64]) -> JacobianField {
    JacobianField {
        per_face: params.chunks_exact(9).map(Matrix3::from_column_slice).collect(),
    }
}

pub(crate) fn run(
    mesh: &Mesh,
    spec: &BlendSpec,
    bank: &ExemplarBank,
    schedule: &NoiseSchedule,
    apply_masks: bool,
) -> Result<DeformResult> {
    let mut session = Session::new(mesh, spec, bank, schedule, apply_masks)?;
    for _ in 0..spec.iterations {
        session.step()?;
    }
    Ok(session.finish())
}

/// Runs the full blended optimization. Targets with control vertices are
/// confined to their accumulated regions of interest.
pub fn optimize_deformation(
    mesh: &Mesh,
    spec: &BlendSpec,
    bank: &ExemplarBank,
    schedule: &NoiseSchedule,
) -> Result<DeformResult> {
    run(mesh, spec, bank, schedule, true)
}

/// Pulls the mesh toward `token` at strength `w` with modified guidance;
/// `w = 0` leaves it untouched.
pub fn self_blend(
    mesh: &Mesh,
    token: &PromptToken,
    w: f64,
    spec: &BlendSpec,
    bank: &ExemplarBank,
    schedule: &NoiseSchedule,
) -> Result<DeformResult> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("self-blend weight {w} outside [0, 1]")));
    }
    let spec = BlendSpec {
        targets: vec![BlendTarget::new(token.clone(), w)],
        modified_cfg: true,
        ..spec.clone()
    };
    optimize_deformation(mesh, &spec, bank, schedule)
}
