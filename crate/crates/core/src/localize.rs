//! Control-vertex localization: self-attention regions of interest
//! back-projected onto the mesh, accumulated into a per-vertex map,
//! thresholded into a vertex mask and rasterized back into every view to
//! mask cross-attention.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::bsd::{self, BlendSpec, BlendTarget, DeformResult};
use crate::error::{check_len, Error, Result};
use crate::guidance::{ActivationSet, ExemplarBank, NoiseSchedule, PromptToken, CROSS_ATTENTION, SELF_ATTENTION};
use crate::image::Image;
use crate::mesh::{identity_mask_assign, poisson_solve, Anchor, GradientOperator, Mesh};
use crate::render::{rasterize_vertex_mask, Camera, PixelMap};

/// Default normalized-ROI threshold.
pub const ROI_THRESHOLD: f64 = 0.8;
/// Scale of the adapter's inverse-masked cross-attention in stabilization.
pub const STABILIZER_WEIGHT: f64 = 0.8;
/// Stabilization triggers when `1 − max w` drops below this.
pub const STABILIZER_GAP: f64 = 0.2;

/// Per-vertex region-of-interest accumulator for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMap {
    pub threshold: f64,
    /// `V_R`: accumulated attention per vertex.
    pub accum: Vec<f64>,
    /// Number of views folded into `accum`.
    pub rounds: usize,
}

impl RoiMap {
    pub fn new(vertex_count: usize, threshold: f64) -> Self {
        RoiMap {
            threshold,
            accum: vec![0.0; vertex_count],
            rounds: 0,
        }
    }

    /// `V̂_R`, min-max normalized. A constant accumulator maps to all ones.
    pub fn normalized(&self) -> Vec<f64> {
        let (lo, hi) = min_max(&self.accum);
        if hi > lo {
            self.accum.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![1.0; self.accum.len()]
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        normalize_threshold(self, self.threshold)
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Patch of the `grid` that contains pixel `[x, y]` of a `width × height` map.
pub fn pixel_patch(pixel: [usize; 2], width: usize, height: usize, grid: (usize, usize)) -> usize {
    let gx = (pixel[0] * grid.0 / width).min(grid.0 - 1);
    let gy = (pixel[1] * grid.1 / height).min(grid.1 - 1);
    gy * grid.0 + gx
}

/// `R_m`: the self-attention rows of the patches under the visible control
/// vertices, averaged over control vertices.
pub fn extract_control_attention(
    activations: &ActivationSet,
    grid: (usize, usize),
    pixel_map: &PixelMap,
    control: &[usize],
) -> Result<Vec<f64>> {
    let m = &activations.layers[SELF_ATTENTION].m;
    let np = grid.0 * grid.1;
    if (m.rows, m.cols) != (np, np) {
        return Err(Error::InvalidArgument(format!(
            "self-attention map is {}x{}, expected {np}x{np} for a {}x{} patch grid",
            m.rows, m.cols, grid.0, grid.1
        )));
    }
    let mut out = vec![0.0; np];
    let mut used = 0usize;
    for &v in control {
        if v >= pixel_map.vertex_pixels.len() {
            return Err(Error::InvalidArgument(format!("control vertex {v} out of range")));
        }
        let Some(px) = pixel_map.vertex_pixel(v) else { continue };
        let row = m.row(pixel_patch(px, pixel_map.width, pixel_map.height, grid));
        for (o, r) in out.iter_mut().zip(row) {
            *o += r;
        }
        used += 1;
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(out)
}

/// Adds `R_m` back onto the mesh: every vertex visible in the view receives
/// the value of the patch its pixel falls in.
pub fn backproject_roi(roi_patches: &[f64], grid: (usize, usize), pixel_map: &PixelMap, state: &mut RoiMap) -> Result<()> {
    check_len("ROI patches", grid.0 * grid.1, roi_patches.len())?;
    check_len("ROI vertices", pixel_map.vertex_pixels.len(), state.accum.len())?;
    for (v, px) in pixel_map.visible_vertices() {
        state.accum[v] += roi_patches[pixel_patch(px, pixel_map.width, pixel_map.height, grid)];
    }
    state.rounds += 1;
    Ok(())
}

/// `mask = V̂_R ≥ th`.
pub fn normalize_threshold(state: &RoiMap, th: f64) -> Vec<bool> {
    state.normalized().into_iter().map(|v| v >= th).collect()
}

/// `R′_m`: the vertex mask rasterized into one view.
pub fn rasterize_roi_mask(mesh: &Mesh, vertices: &[Point3<f64>], vertex_mask: &[bool], camera: &Camera) -> Result<Image> {
    rasterize_vertex_mask(mesh, vertices, vertex_mask, camera)
}

/// Reduces a rasterized mask to the patch grid: a patch is kept when at
/// least half of its pixels are set.
pub fn patch_mask(mask: &Image, grid: (usize, usize)) -> Result<Vec<bool>> {
    let (w, h) = mask.shape();
    if w % grid.0 != 0 || h % grid.1 != 0 {
        return Err(Error::InvalidArgument(format!(
            "mask {w}x{h} does not tile a {}x{} patch grid",
            grid.0, grid.1
        )));
    }
    let (pw, ph) = (w / grid.0, h / grid.1);
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for gy in 0..grid.1 {
        for gx in 0..grid.0 {
            let mut set = 0usize;
            for y in gy * ph..(gy + 1) * ph {
                for x in gx * pw..(gx + 1) * pw {
                    if mask.get(x, y) > 0.5 {
                        set += 1;
                    }
                }
            }
            out.push(2 * set >= pw * ph);
        }
    }
    Ok(out)
}

/// Zeroes the cross-attention rows (and hence the `φ` rows) of patches
/// outside the mask.
pub fn mask_cross_attention(activations: &ActivationSet, patch_mask: &[bool]) -> Result<ActivationSet> {
    let layer = &activations.layers[CROSS_ATTENTION];
    if patch_mask.len() != layer.m.rows {
        return Err(Error::InvalidArgument(format!(
            "cross-attention mask has {} entries for {} patches",
            patch_mask.len(),
            layer.m.rows
        )));
    }
    let mut out = activations.clone();
    let cross = &mut out.layers[CROSS_ATTENTION];
    for (i, _) in patch_mask.iter().enumerate().filter(|(_, keep)| !**keep) {
        cross.m.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
        cross.phi.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(out)
}

/// Whether a weight set is lopsided enough to need stabilization.
pub fn stabilizer_triggered(weights: &[f64]) -> bool {
    let max = weights.iter().cloned().fold(0.0, f64::max);
    1.0 - max < STABILIZER_GAP
}

/// Adds the adapter's cross-attention, masked to the complement of the
/// target's region and scaled by [`STABILIZER_WEIGHT`], to the low-weight
/// target's masked cross-attention. Identity unless triggered.
pub fn stabilize_low_weight(
    masked: &ActivationSet,
    region: &[bool],
    adapter: Option<&ActivationSet>,
    weights: &[f64],
) -> Result<ActivationSet> {
    if !stabilizer_triggered(weights) {
        return Ok(masked.clone());
    }
    let Some(adapter) = adapter else {
        let max = weights.iter().cloned().fold(0.0, f64::max);
        return Err(Error::MissingAdapter { gap: 1.0 - max });
    };
    let inverse: Vec<bool> = region.iter().map(|r| !r).collect();
    let extra = mask_cross_attention(adapter, &inverse)?;
    let mut out = masked.clone();
    let phi = &mut out.layers[CROSS_ATTENTION].phi;
    let add = &extra.layers[CROSS_ATTENTION].phi;
    if (phi.rows, phi.cols) != (add.rows, add.cols) {
        return Err(Error::InvalidArgument("adapter activation shape differs from the target's".into()));
    }
    *phi = phi.add(&add.scaled(STABILIZER_WEIGHT));
    Ok(out)
}

/// Result of a single-target localized run.
#[derive(Debug, Clone)]
pub struct LocalizedResult {
    pub vertices: Vec<Point3<f64>>,
    /// The unconstrained run before masking.
    pub unconstrained: DeformResult,
    pub roi: RoiMap,
    pub vertex_mask: Vec<bool>,
    /// Pin of the final masked solve (the free run's anchor when nothing
    /// was masked out).
    pub anchor: Anchor,
}

/// Deforms freely while accumulating the ROI of `control`, then resets every
/// Jacobian outside the final vertex mask to the identity and solves once
/// more, anchored at an unmasked vertex.
pub fn localized_single_target(
    mesh: &Mesh,
    token: &PromptToken,
    control: &[usize],
    spec: &BlendSpec,
    bank: &ExemplarBank,
    schedule: &NoiseSchedule,
) -> Result<LocalizedResult> {
    if control.is_empty() {
        return Err(Error::InvalidArgument("localized deformation needs at least one control vertex".into()));
    }
    let spec = BlendSpec {
        targets: vec![BlendTarget {
            token: token.clone(),
            weight: 1.0,
            control: Some(control.to_vec()),
        }],
        ..spec.clone()
    };
    let run = bsd::run(mesh, &spec, bank, schedule, false)?;
    let roi = run.roi[0].clone().expect("control target keeps an ROI");
    let vertex_mask = roi.mask();
    if !vertex_mask.iter().any(|&m| m) {
        let (min, max) = min_max(&roi.accum);
        let mean = roi.accum.iter().sum::<f64>() / roi.accum.len().max(1) as f64;
        return Err(Error::EmptyMask { min, max, mean });
    }
    let (vertices, anchor) = match vertex_mask.iter().position(|&m| !m) {
        None => (run.vertices.clone(), run.anchor),
        Some(_) => {
            let field = identity_mask_assign(mesh, &run.field, &vertex_mask)?;
            let vertex = unmasked_anchor(mesh, &vertex_mask);
            let op = GradientOperator::with_anchor(mesh, vertex)?;
            let anchor = Anchor {
                vertex,
                target: mesh.vertices()[vertex],
            };
            (poisson_solve(&op, &field, anchor)?, anchor)
        }
    };
    Ok(LocalizedResult {
        vertices,
        unconstrained: run,
        roi,
        vertex_mask,
        anchor,
    })
}

/// The unmasked vertex closest to the centroid of the unmasked vertices.
fn unmasked_anchor(mesh: &Mesh, vertex_mask: &[bool]) -> usize {
    let free: Vec<usize> = (0..mesh.vertex_count()).filter(|&v| !vertex_mask[v]).collect();
    let pts: Vec<Point3<f64>> = free.iter().map(|&v| mesh.vertices()[v]).collect();
    let c = crate::mesh::centroid(&pts);
    free[crate::mesh::nearest_vertex(&pts, &c)]
}

/// `R′_m` masks of one vertex mask for a set of cameras, reduced to the
/// patch grid.
pub fn view_patch_masks(
    mesh: &Mesh,
    vertices: &[Point3<f64>],
    vertex_mask: &[bool],
    cameras: &[Camera],
    grid: (usize, usize),
) -> Result<Vec<Vec<bool>>> {
    cameras
        .iter()
        .map(|c| patch_mask(&rasterize_roi_mask(mesh, vertices, vertex_mask, c)?, grid))
        .collect()
}
