//! Workflows built on the deformation engine: primitive datasets, keyframe
//! sets and their interpolation, weight sweeps, mesh targets through adapter
//! fine-tuning, silhouette metrics and attribute-transfer checks.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix2, Point3};
use serde::{Deserialize, Serialize};

use crate::bsd::{optimize_deformation, self_blend, BlendSpec, BlendTarget, DeformResult};
use crate::error::{check_len, Error, Result};
use crate::guidance::{
    build_exemplar_bank, finetune_adapter, AdapterReport, BankConfig, ExemplarBank, FinetuneConfig, NoiseSchedule,
    PromptToken,
};
use crate::image::{contact_sheet, Image};
use crate::mesh::shapes::Primitive;
use crate::mesh::{centroid, load_mesh, save_mesh, Mesh};
use crate::render::{render_batch, sample_cameras, Camera, CameraRig, RenderSettings};

/// Renders of one primitive from `count` sampled views.
pub fn primitive_views(
    primitive: Primitive,
    count: usize,
    seed: u64,
    rig: &CameraRig,
    settings: &RenderSettings,
) -> Result<Vec<Image>> {
    let mesh = primitive.mesh();
    render_views_of(&mesh, mesh.vertices(), count, seed, rig, settings)
}

/// Renders of `vertices` from `count` views sampled around their centroid.
pub fn render_views_of(
    mesh: &Mesh,
    vertices: &[Point3<f64>],
    count: usize,
    seed: u64,
    rig: &CameraRig,
    settings: &RenderSettings,
) -> Result<Vec<Image>> {
    let cams = sample_cameras(count, seed, rig, centroid(vertices))?;
    Ok(render_batch(mesh, vertices, &cams, settings)?.images)
}

/// Camera seed of a class in generated datasets.
pub fn class_seed(seed: u64, primitive: Primitive) -> u64 {
    let k = Primitive::ALL.iter().position(|&p| p == primitive).expect("listed") as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k + 1)
}

/// Exemplar bank over rendered primitive classes.
pub fn primitive_bank(
    primitives: &[Primitive],
    views: usize,
    seed: u64,
    rig: &CameraRig,
    settings: &RenderSettings,
    config: BankConfig,
) -> Result<ExemplarBank> {
    let classes = primitives
        .iter()
        .map(|&p| Ok((p.name().to_string(), primitive_views(p, views, class_seed(seed, p), rig, settings)?)))
        .collect::<Result<Vec<_>>>()?;
    build_exemplar_bank(&classes, seed, config)
}

/// Pixels whose shade marks them as covered. Covered pixels are at least
/// the ambient level 0.2, so half of it separates them from background.
pub fn silhouette(image: &Image) -> Vec<bool> {
    image.data().iter().map(|&v| v > 0.1).collect()
}

pub fn silhouette_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pixels covered in at least half of a class's exemplars.
pub fn class_mean_silhouette(bank: &ExemplarBank, class: &str) -> Result<Vec<bool>> {
    let c = &bank.classes()[bank.class_index(class)?];
    if c.images.is_empty() {
        return Err(Error::EmptyExemplarSet);
    }
    let mut count = vec![0usize; bank.width() * bank.height()];
    for img in &c.images {
        for (n, s) in count.iter_mut().zip(silhouette(img)) {
            *n += s as usize;
        }
    }
    Ok(count.into_iter().map(|n| 2 * n >= c.images.len()).collect())
}

/// Mean IoU between the silhouettes of `vertices`, seen from `views` sampled
/// cameras, and a class's mean silhouette.
pub fn class_iou(
    mesh: &Mesh,
    vertices: &[Point3<f64>],
    bank: &ExemplarBank,
    class: &str,
    views: usize,
    seed: u64,
    rig: &CameraRig,
    settings: &RenderSettings,
) -> Result<f64> {
    let reference = class_mean_silhouette(bank, class)?;
    let images = render_views_of(mesh, vertices, views, seed, rig, settings)?;
    Ok(images
        .iter()
        .map(|img| silhouette_iou(&silhouette(img), &reference))
        .sum::<f64>()
        / images.len() as f64)
}

/// Cameras at evenly spaced azimuths and a fixed 15° elevation.
pub fn turntable_cameras(center: Point3<f64>, count: usize, rig: &CameraRig) -> Result<Vec<Camera>> {
    (0..count)
        .map(|k| rig.camera_at(center, 2.0 * std::f64::consts::PI * k as f64 / count as f64, 15f64.to_radians()))
        .collect()
}

/// Renders from [`turntable_cameras`] around the centroid of `vertices`.
pub fn turntable(
    mesh: &Mesh,
    vertices: &[Point3<f64>],
    count: usize,
    rig: &CameraRig,
    settings: &RenderSettings,
) -> Result<Vec<Image>> {
    let cams = turntable_cameras(centroid(vertices), count, rig)?;
    Ok(render_batch(mesh, vertices, &cams, settings)?.images)
}

/// One stored deformation with the weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub weights: Vec<f64>,
    pub vertices: Vec<Point3<f64>>,
}

/// Deformations of one source mesh; correspondence is the vertex index.
#[derive(Debug, Clone)]
pub struct KeyframeSet {
    pub source: Mesh,
    pub keyframes: Vec<Keyframe>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyframeManifest {
    version: u32,
    source: String,
    keyframes: Vec<KeyframeEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeyframeEntry {
    file: String,
    weights: Vec<f64>,
}

const KEYFRAME_MANIFEST_VERSION: u32 = 1;

impl KeyframeSet {
    pub fn new(source: Mesh) -> Self {
        KeyframeSet {
            source,
            keyframes: Vec::new(),
        }
    }

    pub fn push(&mut self, weights: Vec<f64>, vertices: Vec<Point3<f64>>) -> Result<()> {
        check_len("keyframe vertices", self.source.vertex_count(), vertices.len())?;
        self.keyframes.push(Keyframe { weights, vertices });
        Ok(())
    }

    pub fn mesh(&self, k: usize) -> Result<Mesh> {
        self.source.with_vertices(self.keyframes[k].vertices.clone())
    }

    /// Writes `source.obj`, `keyframe_NNN.obj` and `keyframes.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_mesh(dir.join("source.obj"), &self.source)?;
        let mut entries = Vec::with_capacity(self.keyframes.len());
        for (k, kf) in self.keyframes.iter().enumerate() {
            let file = format!("keyframe_{k:03}.obj");
            save_mesh(dir.join(&file), &self.mesh(k)?)?;
            entries.push(KeyframeEntry {
                file,
                weights: kf.weights.clone(),
            });
        }
        let manifest = KeyframeManifest {
            version: KEYFRAME_MANIFEST_VERSION,
            source: "source.obj".into(),
            keyframes: entries,
        };
        let path = dir.join("keyframes.json");
        let text = serde_json::to_string_pretty(&manifest).expect("serializable");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("keyframes.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: KeyframeManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if manifest.version != KEYFRAME_MANIFEST_VERSION {
            return Err(Error::Parse {
                path,
                line: 0,
                message: format!("unsupported keyframe manifest version {}", manifest.version),
            });
        }
        let source = load_mesh(dir.join(&manifest.source))?;
        let mut set = KeyframeSet::new(source);
        for e in manifest.keyframes {
            let m = load_mesh(dir.join(&e.file))?;
            if m.faces() != set.source.faces() {
                return Err(Error::InvalidArgument(format!("{} does not share the source topology", e.file)));
            }
            set.push(e.weights, m.vertices().to_vec())?;
        }
        Ok(set)
    }
}

/// Vertex-linear interpolation between keyframes `segment` and `segment + 1`.
pub fn interpolate_keyframes(set: &KeyframeSet, s: f64, segment: usize) -> Result<Vec<Point3<f64>>> {
    if segment + 1 >= set.keyframes.len() {
        return Err(Error::InvalidArgument(format!(
            "segment {segment} needs keyframes {segment} and {}, set has {}",
            segment + 1,
            set.keyframes.len()
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("interpolation parameter {s} outside [0, 1]")));
    }
    let a = &set.keyframes[segment].vertices;
    let b = &set.keyframes[segment + 1].vertices;
    Ok(a.iter()
        .zip(b)
        .map(|(p, q)| Point3::from(p.coords * (1.0 - s) + q.coords * s))
        .collect())
}

/// Results of a weight sweep.
#[derive(Debug, Clone)]
pub struct WeightGrid {
    pub keyframes: KeyframeSet,
    pub runs: Vec<DeformResult>,
    /// One row of turntable renders per grid point.
    pub contact_sheet: Image,
}

/// Views per row of a weight-grid contact sheet.
pub const TURNTABLE_VIEWS: usize = 4;

/// One optimization per weight vector, all under the seed of `spec`.
pub fn weight_grid(
    mesh: &Mesh,
    tokens: &[PromptToken],
    grid: &[Vec<f64>],
    spec: &BlendSpec,
    bank: &ExemplarBank,
    schedule: &NoiseSchedule,
) -> Result<WeightGrid> {
    let mut set = KeyframeSet::new(mesh.clone());
    let mut runs = Vec::with_capacity(grid.len());
    let mut frames = Vec::new();
    for weights in grid {
        check_len("grid weight vector", tokens.len(), weights.len())?;
        let targets = tokens
            .iter()
            .zip(weights)
            .map(|(t, &w)| BlendTarget::new(t.clone(), w))
            .collect();
        let run_spec = BlendSpec {
            targets,
            ..spec.clone()
        };
        let run = optimize_deformation(mesh, &run_spec, bank, schedule)?;
        frames.extend(turntable(mesh, &run.vertices, TURNTABLE_VIEWS, &spec.rig, &spec.render)?);
        set.push(weights.clone(), run.vertices.clone())?;
        runs.push(run);
    }
    Ok(WeightGrid {
        keyframes: set,
        runs,
        contact_sheet: contact_sheet(&frames, TURNTABLE_VIEWS),
    })
}

/// Default number of target renders the adapter is fitted on.
pub const MESH_TARGET_VIEWS: usize = 48;

#[derive(Debug, Clone)]
pub struct MeshTargetResult {
    pub result: DeformResult,
    pub adapter: AdapterReport,
    /// The bank with the fitted adapter registered.
    pub bank: ExemplarBank,
}

/// Fits an adapter to renders of `target`, then self-blends `source`
/// toward it at weight `w`.
#[allow(clippy::too_many_arguments)]
pub fn mesh_target_pipeline(
    source: &Mesh,
    target: &Mesh,
    w: f64,
    spec: &BlendSpec,
    bank: &ExemplarBank,
    schedule: &NoiseSchedule,
    views: usize,
    finetune: &FinetuneConfig,
) -> Result<MeshTargetResult> {
    let renders = render_views_of(target, target.vertices(), views, spec.seed ^ 0x7a67, &spec.rig, &spec.render)?;
    let id = format!("mesh-target-{}", bank.adapters().len());
    let (tuned, report) = finetune_adapter(bank, &renders, &id, schedule, finetune)?;
    let result = self_blend(source, &PromptToken::adapter(id), w, spec, &tuned, schedule)?;
    Ok(MeshTargetResult {
        result,
        adapter: report,
        bank: tuned,
    })
}

/// Outcome of [`verify_attribute_transfer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub passed: bool,
    pub uv_identical: bool,
    pub faces_identical: bool,
    /// Per-face ratio of singular values of the source-to-deformed map;
    /// 1 for a locally conformal deformation.
    pub distortion: Vec<f64>,
    pub message: String,
}

/// Checks that a deformed mesh carries the source's faces and texture
/// coordinates untouched and reports how conformally each face deformed.
pub fn verify_attribute_transfer(source: &Mesh, deformed: &Mesh) -> TransferReport {
    if source.vertex_count() != deformed.vertex_count() {
        return TransferReport {
            passed: false,
            uv_identical: false,
            faces_identical: false,
            distortion: Vec::new(),
            message: format!(
                "vertex count mismatch: source has {}, deformed has {}",
                source.vertex_count(),
                deformed.vertex_count()
            ),
        };
    }
    let faces_identical = source.faces() == deformed.faces();
    let uv_identical = match (source.uv(), deformed.uv()) {
        (None, None) => true,
        (Some(a), Some(b)) => {
            a.corners == b.corners
                && a.coords.len() == b.coords.len()
                && a.coords
                    .iter()
                    .zip(&b.coords)
                    .all(|(x, y)| x[0].to_bits() == y[0].to_bits() && x[1].to_bits() == y[1].to_bits())
        }
        _ => false,
    };
    let distortion = if faces_identical {
        conformal_distortion(source, deformed.vertices())
    } else {
        Vec::new()
    };
    let passed = faces_identical && uv_identical;
    let message = match (faces_identical, uv_identical) {
        (true, true) => "faces and texture coordinates identical".to_string(),
        (false, _) => "face lists differ".to_string(),
        (true, false) => "texture coordinates differ".to_string(),
    };
    TransferReport {
        passed,
        uv_identical,
        faces_identical,
        distortion,
        message,
    }
}

/// `σ_max/σ_min` of each face's tangential map from source to deformed.
pub fn conformal_distortion(source: &Mesh, deformed: &[Point3<f64>]) -> Vec<f64> {
    source
        .faces()
        .iter()
        .zip(source.face_frames())
        .map(|(&[a, b, c], frame)| {
            let e1 = deformed[b] - deformed[a];
            let e2 = deformed[c] - deformed[a];
            let n = e1.cross(&e2);
            if !(n.norm() > 0.0) {
                return f64::INFINITY;
            }
            let t1 = e1.normalize();
            let t2 = n.normalize().cross(&t1);
            let local = Matrix2::new(t1.dot(&e1), t1.dot(&e2), t2.dot(&e1), t2.dot(&e2));
            let m = local * frame.local_inv;
            singular_ratio(&m)
        })
        .collect()
}

fn singular_ratio(m: &Matrix2<f64>) -> f64 {
    let f = m.norm_squared();
    let det = m.determinant();
    let disc = (f * f - 4.0 * det * det).max(0.0).sqrt();
    let hi = ((f + disc) / 2.0).sqrt();
    let lo = ((f - disc) / 2.0).max(0.0).sqrt();
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// Mean displacement of each vertex from the source, in model units.
pub fn mean_displacement(source: &[Point3<f64>], deformed: &[Point3<f64>]) -> f64 {
    let n = source.len().max(1) as f64;
    source.iter().zip(deformed).map(|(a, b)| (b - a).norm()).sum::<f64>() / n
}
