//! One function per command. Each writes only inside the run's output
//! directory and finishes with `manifest.json` and `resolved.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use blendeform::bsd::{optimize_deformation, self_blend, BlendSpec, BlendTarget, DeformResult, IterationRecord};
use blendeform::concepts::{
    class_seed, mesh_target_pipeline, primitive_bank, primitive_views, turntable, turntable_cameras,
    interpolate_keyframes, verify_attribute_transfer, weight_grid, KeyframeSet, MESH_TARGET_VIEWS,
};
use blendeform::guidance::{
    build_exemplar_bank, invert_image, BankConfig, ExemplarBank, FinetuneConfig, InversionConfig, NoiseSchedule,
    PromptToken,
};
use blendeform::image::Image;
use blendeform::localize::{localized_single_target, rasterize_roi_mask, RoiMap};
use blendeform::mesh::shapes::Primitive;
use blendeform::mesh::{centroid, load_mesh, save_mesh, Anchor, Mesh};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Command, RunConfig};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

const DATASET_VERSION: u32 = 1;

/// Index of a `gen-dataset` folder: `<class>/view_NNN.png` per class.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetIndex {
    version: u32,
    seed: u64,
    resolution: usize,
    classes: Vec<DatasetClass>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetClass {
    name: String,
    camera_seed: u64,
    files: Vec<String>,
}

#[derive(Serialize)]
struct RunLog {
    label: String,
    history: Vec<IterationRecord>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    seeds: Value,
    spec: Option<BlendSpec>,
    bank: Option<Value>,
    anchor: Option<Anchor>,
    runs: Vec<RunLog>,
    details: Value,
    artifacts: Vec<String>,
}

/// Output directory plus the list of files written so far.
struct Out {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Out {
    fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Out {
            dir,
            artifacts: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.text(name, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
    }

    fn mesh(&mut self, name: &str, mesh: &Mesh) -> Result<()> {
        let p = self.path(name);
        Ok(save_mesh(p, mesh)?)
    }

    fn png(&mut self, name: &str, img: &Image) -> Result<()> {
        let p = self.path(name);
        Ok(img.write_png(p)?)
    }
}

/// Everything a command reports back for the manifest.
#[derive(Default)]
struct Report {
    spec: Option<BlendSpec>,
    bank: Option<Value>,
    anchor: Option<Anchor>,
    runs: Vec<RunLog>,
    details: Value,
}

pub fn run(cfg: &RunConfig) -> Result<PathBuf> {
    let mut out = Out::create(cfg.output_dir())?;
    let report = match cfg.command() {
        Command::GenDataset => gen_dataset(cfg, &mut out)?,
        Command::BuildBank => build_bank(cfg, &mut out)?,
        Command::Deform => deform(cfg, &mut out)?,
        Command::Blend => blend(cfg, &mut out)?,
        Command::Localize => localize(cfg, &mut out)?,
        Command::SelfBlend => self_blend_cmd(cfg, &mut out)?,
        Command::Invert => invert(cfg, &mut out)?,
        Command::MeshTarget => mesh_target(cfg, &mut out)?,
        Command::Interpolate => interpolate(cfg, &mut out)?,
        Command::Verify => verify(cfg, &mut out)?,
    };
    out.text("resolved.toml", &cfg.to_toml())?;
    let artifacts = std::mem::take(&mut out.artifacts);
    let manifest = Manifest {
        tool: "blendeform",
        version: env!("CARGO_PKG_VERSION"),
        command: cfg.command().name(),
        config: cfg,
        seeds: json!({ "seed": cfg.seed, "bank_seed": cfg.bank_seed }),
        spec: report.spec,
        bank: report.bank,
        anchor: report.anchor,
        runs: report.runs,
        details: report.details,
        artifacts,
    };
    out.json("manifest.json", &manifest)?;
    Ok(out.dir)
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::default()
}

fn load_input_mesh(field: &str, spec: &str) -> Result<Mesh> {
    match spec.strip_prefix("primitive:") {
        Some(name) => Primitive::from_name(name).map(Primitive::mesh).ok_or_else(|| CliError::Config {
            field: field.into(),
            message: format!("unknown primitive '{name}'"),
        }),
        None => Ok(load_mesh(spec)?),
    }
}

fn source_mesh(cfg: &RunConfig) -> Result<Mesh> {
    load_input_mesh("mesh", cfg.mesh.as_deref().expect("validated"))
}

fn primitives(cfg: &RunConfig) -> Vec<Primitive> {
    cfg.classes.iter().map(|c| Primitive::from_name(c).expect("validated")).collect()
}

/// The bank named by the config: a checkpoint, a dataset folder, or
/// primitive renders made on the spot.
fn resolve_bank(cfg: &RunConfig, spec: &BlendSpec) -> Result<(ExemplarBank, Value)> {
    if let Some(path) = &cfg.bank {
        let bank = ExemplarBank::load(path)?;
        let info = bank_info(&bank, json!({ "checkpoint": path }));
        return Ok((bank, info));
    }
    if let Some(dir) = &cfg.dataset {
        let bank = bank_from_dataset(dir, cfg.bank_seed)?;
        let info = bank_info(&bank, json!({ "dataset": dir }));
        return Ok((bank, info));
    }
    let bank = primitive_bank(
        &primitives(cfg),
        cfg.class_views,
        cfg.bank_seed,
        &spec.rig,
        &spec.render,
        BankConfig::default(),
    )?;
    let info = bank_info(&bank, json!({ "primitives": cfg.classes, "views": cfg.class_views }));
    Ok((bank, info))
}

fn bank_info(bank: &ExemplarBank, source: Value) -> Value {
    json!({
        "source": source,
        "seed": bank.seed,
        "config": bank.config,
        "classes": bank.class_names(),
        "adapters": bank.adapters().iter().map(|a| a.id.clone()).collect::<Vec<_>>(),
    })
}

fn bank_from_dataset(dir: &Path, seed: u64) -> Result<ExemplarBank> {
    let index_path = dir.join("dataset.json");
    let text = fs::read_to_string(&index_path).map_err(|e| CliError::io(&index_path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| CliError::ConfigParse {
        path: index_path.clone(),
        message: e.to_string(),
    })?;
    if index.version != DATASET_VERSION {
        return Err(CliError::ConfigParse {
            path: index_path,
            message: format!("unsupported dataset version {}", index.version),
        });
    }
    let classes = index
        .classes
        .iter()
        .map(|c| {
            let images = c
                .files
                .iter()
                .map(|f| Image::read_png(dir.join(f)))
                .collect::<blendeform::Result<Vec<_>>>()?;
            Ok((c.name.clone(), images))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(build_exemplar_bank(&classes, seed, BankConfig::default())?)
}

/// Parses a target token and checks it against the bank.
fn resolve_token(text: &str, bank: &ExemplarBank, field: &str) -> Result<PromptToken> {
    let token = if text == "null" {
        PromptToken::Null
    } else if let Some(id) = text.strip_prefix("adapter:") {
        PromptToken::adapter(id)
    } else if let Some(file) = text.strip_prefix('@') {
        let body = fs::read_to_string(file).map_err(|e| CliError::io(file, e))?;
        serde_json::from_str(&body).map_err(|e| CliError::ConfigParse {
            path: file.into(),
            message: e.to_string(),
        })?
    } else {
        PromptToken::class(text)
    };
    let known = match &token {
        PromptToken::Class { name } => bank.class_index(name).map(|_| ()),
        PromptToken::Adapter { id } => bank.adapter(id).map(|_| ()),
        PromptToken::Inverted { classes, .. } => classes.iter().try_for_each(|c| bank.class_index(c).map(|_| ())),
        PromptToken::Null => Ok(()),
    };
    known.and_then(|_| token.validate()).map_err(|e| CliError::Config {
        field: field.into(),
        message: e.to_string(),
    })?;
    Ok(token)
}

fn resolve_targets(cfg: &RunConfig, bank: &ExemplarBank) -> Result<Vec<BlendTarget>> {
    cfg.targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            Ok(BlendTarget {
                token: resolve_token(&t.token, bank, &format!("targets[{i}].token"))?,
                weight: t.weight,
                control: (!t.control.is_empty()).then(|| t.control.clone()),
            })
        })
        .collect()
}

fn write_turntable(out: &mut Out, cfg: &RunConfig, spec: &BlendSpec, mesh: &Mesh, vertices: &[Point3<f64>]) -> Result<()> {
    let frames = turntable(mesh, vertices, cfg.turntable_views, &spec.rig, &spec.render)?;
    for (k, f) in frames.iter().enumerate() {
        out.png(&format!("turntable_{k:02}.png"), f)?;
    }
    Ok(())
}

/// `V_R`, `V̂_R` and the mask as JSON, plus the mask rasterized into the
/// turntable views.
fn write_roi(
    out: &mut Out,
    name: &str,
    cfg: &RunConfig,
    spec: &BlendSpec,
    mesh: &Mesh,
    vertices: &[Point3<f64>],
    roi: &RoiMap,
) -> Result<()> {
    let mask = roi.mask();
    out.json(
        &format!("{name}.json"),
        &json!({
            "threshold": roi.threshold,
            "rounds": roi.rounds,
            "accum": roi.accum,
            "normalized": roi.normalized(),
            "mask": mask,
        }),
    )?;
    for (k, cam) in turntable_cameras(centroid(vertices), cfg.turntable_views, &spec.rig)?.iter().enumerate() {
        let img = rasterize_roi_mask(mesh, vertices, &mask, cam)?;
        out.png(&format!("{name}_view_{k:02}.png"), &img)?;
    }
    Ok(())
}

fn run_log(label: impl Into<String>, run: &DeformResult) -> RunLog {
    RunLog {
        label: label.into(),
        history: run.history.clone(),
    }
}

fn gen_dataset(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let spec = cfg.blend_spec(Vec::new());
    let mut classes = Vec::new();
    for p in primitives(cfg) {
        let seed = class_seed(cfg.seed, p);
        let dir = out.dir.join(p.name());
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut files = Vec::new();
        for (k, img) in primitive_views(p, cfg.class_views, seed, &spec.rig, &spec.render)?.iter().enumerate() {
            let file = format!("{}/view_{k:03}.png", p.name());
            out.png(&file, img)?;
            files.push(file);
        }
        classes.push(DatasetClass {
            name: p.name().into(),
            camera_seed: seed,
            files,
        });
    }
    let index = DatasetIndex {
        version: DATASET_VERSION,
        seed: cfg.seed,
        resolution: cfg.resolution,
        classes,
    };
    out.json("dataset.json", &index)?;
    Ok(Report {
        details: json!({ "images": index.classes.iter().map(|c| c.files.len()).sum::<usize>() }),
        ..Default::default()
    })
}

fn build_bank(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let spec = cfg.blend_spec(Vec::new());
    let (bank, info) = match &cfg.dataset {
        Some(dir) => {
            let bank = bank_from_dataset(dir, cfg.seed)?;
            let info = bank_info(&bank, json!({ "dataset": dir }));
            (bank, info)
        }
        None => {
            let bank = primitive_bank(&primitives(cfg), cfg.class_views, cfg.seed, &spec.rig, &spec.render, BankConfig::default())?;
            let info = bank_info(&bank, json!({ "primitives": cfg.classes, "views": cfg.class_views }));
            (bank, info)
        }
    };
    let p = out.path("bank.bin");
    bank.save(p)?;
    Ok(Report {
        bank: Some(info),
        ..Default::default()
    })
}

fn deform(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let mesh = source_mesh(cfg)?;
    let spec0 = cfg.blend_spec(Vec::new());
    let (bank, info) = resolve_bank(cfg, &spec0)?;
    let spec = BlendSpec {
        targets: resolve_targets(cfg, &bank)?,
        ..spec0
    };
    let run = optimize_deformation(&mesh, &spec, &bank, &schedule())?;
    out.mesh("deformed.obj", &mesh.with_vertices(run.vertices.clone())?)?;
    write_turntable(out, cfg, &spec, &mesh, &run.vertices)?;
    for (i, roi) in run.roi.iter().enumerate() {
        if let Some(roi) = roi {
            write_roi(out, &format!("roi_target_{i}"), cfg, &spec, &mesh, &run.vertices, roi)?;
        }
    }
    Ok(Report {
        anchor: Some(run.anchor),
        runs: vec![run_log("deform", &run)],
        spec: Some(spec),
        bank: Some(info),
        details: Value::Null,
    })
}

fn blend(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let mesh = source_mesh(cfg)?;
    let spec = cfg.blend_spec(Vec::new());
    let (bank, info) = resolve_bank(cfg, &spec)?;
    let tokens = resolve_targets(cfg, &bank)?.into_iter().map(|t| t.token).collect::<Vec<_>>();
    let grid = weight_grid(&mesh, &tokens, &cfg.grid, &spec, &bank, &schedule())?;
    let kdir = out.dir.join("keyframes");
    grid.keyframes.save(&kdir)?;
    out.artifacts.push("keyframes/source.obj".into());
    for k in 0..grid.keyframes.keyframes.len() {
        out.artifacts.push(format!("keyframes/keyframe_{k:03}.obj"));
    }
    out.artifacts.push("keyframes/keyframes.json".into());
    out.png("contact_sheet.png", &grid.contact_sheet)?;
    Ok(Report {
        anchor: grid.runs.first().map(|r| r.anchor),
        runs: grid
            .runs
            .iter()
            .zip(&cfg.grid)
            .map(|(r, w)| run_log(format!("{w:?}"), r))
            .collect(),
        spec: Some(spec),
        bank: Some(info),
        details: Value::Null,
    })
}

fn localize(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let mesh = source_mesh(cfg)?;
    let spec = cfg.blend_spec(Vec::new());
    if let Some(&v) = cfg.control.iter().find(|&&v| v >= mesh.vertex_count()) {
        return Err(CliError::Config {
            field: "control".into(),
            message: format!("vertex {v} out of range ({} vertices)", mesh.vertex_count()),
        });
    }
    let (bank, info) = resolve_bank(cfg, &spec)?;
    let token = resolve_token(&cfg.targets[0].token, &bank, "targets[0].token")?;
    let res = localized_single_target(&mesh, &token, &cfg.control, &spec, &bank, &schedule())?;
    out.mesh("deformed.obj", &mesh.with_vertices(res.vertices.clone())?)?;
    out.mesh("unconstrained.obj", &mesh.with_vertices(res.unconstrained.vertices.clone())?)?;
    write_turntable(out, cfg, &spec, &mesh, &res.vertices)?;
    write_roi(out, "roi", cfg, &spec, &mesh, &res.vertices, &res.roi)?;
    Ok(Report {
        anchor: Some(res.anchor),
        runs: vec![run_log("unconstrained", &res.unconstrained)],
        spec: Some(BlendSpec {
            targets: vec![BlendTarget {
                token,
                weight: 1.0,
                control: Some(cfg.control.clone()),
            }],
            ..spec
        }),
        bank: Some(info),
        details: json!({ "masked_vertices": res.vertex_mask.iter().filter(|&&m| m).count() }),
    })
}

fn self_blend_cmd(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let mesh = source_mesh(cfg)?;
    let spec = cfg.blend_spec(Vec::new());
    let (bank, info) = resolve_bank(cfg, &spec)?;
    let token = resolve_token(&cfg.targets[0].token, &bank, "targets[0].token")?;
    let w = cfg.weight.expect("validated");
    let run = self_blend(&mesh, &token, w, &spec, &bank, &schedule())?;
    out.mesh("deformed.obj", &mesh.with_vertices(run.vertices.clone())?)?;
    write_turntable(out, cfg, &spec, &mesh, &run.vertices)?;
    Ok(Report {
        anchor: Some(run.anchor),
        runs: vec![run_log("self-blend", &run)],
        spec: Some(BlendSpec {
            targets: vec![BlendTarget::new(token, w)],
            modified_cfg: true,
            ..spec
        }),
        bank: Some(info),
        details: Value::Null,
    })
}

fn invert(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let spec0 = cfg.blend_spec(Vec::new());
    let (bank, info) = resolve_bank(cfg, &spec0)?;
    let images = cfg
        .images
        .iter()
        .map(Image::read_png)
        .collect::<blendeform::Result<Vec<_>>>()?;
    let icfg = InversionConfig {
        steps: cfg.optim.inversion_steps.unwrap_or(InversionConfig::default().steps),
        seed: cfg.seed,
        ..Default::default()
    };
    let (token, inv) = invert_image(&bank, &images, &schedule(), &icfg)?;
    out.json("token.json", &token)?;
    out.json("inversion.json", &inv)?;
    let mut report = Report {
        bank: Some(info),
        details: json!({ "inversion": icfg }),
        ..Default::default()
    };
    if let Some(m) = &cfg.mesh {
        let mesh = load_input_mesh("mesh", m)?;
        let spec = BlendSpec {
            targets: vec![BlendTarget::new(token, cfg.weight.unwrap_or(1.0))],
            ..spec0
        };
        let run = optimize_deformation(&mesh, &spec, &bank, &schedule())?;
        out.mesh("deformed.obj", &mesh.with_vertices(run.vertices.clone())?)?;
        write_turntable(out, cfg, &spec, &mesh, &run.vertices)?;
        report.anchor = Some(run.anchor);
        report.runs.push(run_log("deform", &run));
        report.spec = Some(spec);
    }
    Ok(report)
}

fn mesh_target(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let mesh = source_mesh(cfg)?;
    let target = load_input_mesh("target_mesh", cfg.target_mesh.as_deref().expect("validated"))?;
    let spec = cfg.blend_spec(Vec::new());
    let (bank, info) = resolve_bank(cfg, &spec)?;
    let ft = FinetuneConfig {
        iterations: cfg.optim.finetune_iterations.unwrap_or(FinetuneConfig::default().iterations),
        seed: cfg.seed,
        ..Default::default()
    };
    let w = cfg.weight.expect("validated");
    let res = mesh_target_pipeline(&mesh, &target, w, &spec, &bank, &schedule(), MESH_TARGET_VIEWS, &ft)?;
    out.mesh("deformed.obj", &mesh.with_vertices(res.result.vertices.clone())?)?;
    write_turntable(out, cfg, &spec, &mesh, &res.result.vertices)?;
    let p = out.path("bank.bin");
    res.bank.save(p)?;
    out.json("adapter.json", &res.adapter)?;
    Ok(Report {
        anchor: Some(res.result.anchor),
        runs: vec![run_log("mesh-target", &res.result)],
        spec: Some(BlendSpec {
            targets: vec![BlendTarget::new(PromptToken::adapter(res.adapter.id.clone()), w)],
            modified_cfg: true,
            ..spec
        }),
        bank: Some(info),
        details: json!({ "finetune": ft, "target_views": MESH_TARGET_VIEWS }),
    })
}

fn interpolate(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let set = KeyframeSet::load(cfg.keyframes.as_ref().expect("validated"))?;
    let mut files = Vec::new();
    for (k, &s) in cfg.s.iter().enumerate() {
        let vertices = interpolate_keyframes(&set, s, cfg.segment)?;
        let name = format!("interp_{k:03}.obj");
        out.mesh(&name, &set.source.with_vertices(vertices)?)?;
        files.push(json!({ "s": s, "file": name }));
    }
    Ok(Report {
        details: json!({ "segment": cfg.segment, "frames": files }),
        ..Default::default()
    })
}

fn verify(cfg: &RunConfig, out: &mut Out) -> Result<Report> {
    let source = source_mesh(cfg)?;
    let deformed = load_input_mesh("deformed", cfg.deformed.as_deref().expect("validated"))?;
    let report = verify_attribute_transfer(&source, &deformed);
    out.json("transfer.json", &report)?;
    if !report.passed {
        return Err(CliError::TransferFailed(report.message));
    }
    Ok(Report {
        details: json!({ "passed": true }),
        ..Default::default()
    })
}
