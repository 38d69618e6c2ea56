//! Run configuration: a TOML file with a `version` header, overridden field
//! by field from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use blendeform::bsd::{BlendSpec, BlendTarget};
use blendeform::guidance::PromptToken;
use blendeform::mesh::shapes::Primitive;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;
/// When set, relative output directories resolve against this path.
pub const OUTPUT_ROOT_ENV: &str = "BLENDEFORM_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[value(rename_all = "kebab-case")]
pub enum Command {
    GenDataset,
    BuildBank,
    Deform,
    Blend,
    Localize,
    SelfBlend,
    Invert,
    MeshTarget,
    Interpolate,
    Verify,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenDataset => "gen-dataset",
            Command::BuildBank => "build-bank",
            Command::Deform => "deform",
            Command::Blend => "blend",
            Command::Localize => "localize",
            Command::SelfBlend => "self-blend",
            Command::Invert => "invert",
            Command::MeshTarget => "mesh-target",
            Command::Interpolate => "interpolate",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

/// One concept of a blend. `token` is a class name, `null`,
/// `adapter:<id>`, or `@<file>` naming a token written by `invert`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub token: String,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub control: Vec<usize>,
}

/// Optimizer settings that override the selected profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub iterations: Option<usize>,
    /// Views rendered per iteration.
    pub views: Option<usize>,
    pub guidance_scale: Option<f64>,
    pub reg_weight: Option<f64>,
    pub lr: Option<f64>,
    pub modified_cfg: Option<bool>,
    pub roi_threshold: Option<f64>,
    pub finetune_iterations: Option<usize>,
    pub inversion_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub command: Option<Command>,
    #[serde(default)]
    pub profile: Profile,
    pub output: Option<PathBuf>,
    /// Seed of the command's own randomness.
    #[serde(default)]
    pub seed: u64,
    /// Seed of a bank built on the fly (no `bank` or `dataset` given).
    #[serde(default)]
    pub bank_seed: u64,
    /// An OBJ path or `primitive:<name>`.
    pub mesh: Option<String>,
    /// Mesh whose renders define a mesh target.
    pub target_mesh: Option<String>,
    /// Deformed mesh checked by `verify`.
    pub deformed: Option<String>,
    /// Bank checkpoint.
    pub bank: Option<PathBuf>,
    /// Dataset folder written by `gen-dataset`.
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub classes: Vec<String>,
    /// Renders per class in datasets and on-the-fly banks.
    #[serde(default = "default_class_views")]
    pub class_views: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub targets: Vec<TargetConfig>,
    /// Control vertices of `localize`.
    #[serde(default)]
    pub control: Vec<usize>,
    /// Weight vectors swept by `blend`, one per keyframe.
    #[serde(default)]
    pub grid: Vec<Vec<f64>>,
    /// Strength of `self-blend` and `mesh-target`.
    pub weight: Option<f64>,
    /// Target images of `invert`.
    #[serde(default)]
    pub images: Vec<PathBuf>,
    /// Keyframe folder read by `interpolate`.
    pub keyframes: Option<PathBuf>,
    /// Interpolation parameters.
    #[serde(default)]
    pub s: Vec<f64>,
    #[serde(default)]
    pub segment: usize,
    #[serde(default = "default_turntable")]
    pub turntable_views: usize,
    #[serde(default)]
    pub optim: OptimConfig,
}

fn default_classes() -> Vec<String> {
    vec!["box".into(), "cone".into()]
}

fn default_class_views() -> usize {
    16
}

fn default_resolution() -> usize {
    32
}

fn default_turntable() -> usize {
    8
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            command: None,
            profile: Profile::Desk,
            output: None,
            seed: 0,
            bank_seed: 0,
            mesh: None,
            target_mesh: None,
            deformed: None,
            bank: None,
            dataset: None,
            classes: default_classes(),
            class_views: default_class_views(),
            resolution: default_resolution(),
            targets: Vec::new(),
            control: Vec::new(),
            grid: Vec::new(),
            weight: None,
            images: Vec::new(),
            keyframes: None,
            s: Vec::new(),
            segment: 0,
            turntable_views: default_turntable(),
            optim: OptimConfig::default(),
        }
    }
}

fn bad(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::ConfigParse {
            path: path.to_path_buf(),
            message: e.message().to_string(),
        })?;
        if cfg.version != CONFIG_VERSION {
            return Err(bad("version", format!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version)));
        }
        if let Some(dir) = path.parent() {
            cfg.rebase_inputs(dir);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Makes every path absolute against the working directory (inputs)
    /// or the output root (output), so `resolved.toml` reruns from anywhere.
    pub fn absolutize(&mut self) -> Result<(), CliError> {
        let cwd = std::env::current_dir().map_err(|e| CliError::io(".", e))?;
        self.rebase_inputs(&cwd);
        let out = self.output_dir();
        self.output = Some(if out.is_relative() { cwd.join(out) } else { out });
        Ok(())
    }

    /// Input paths in a config file are relative to the file.
    fn rebase_inputs(&mut self, dir: &Path) {
        let join = |p: &Path| if p.is_relative() { dir.join(p) } else { p.to_path_buf() };
        let join_mesh = |m: &mut Option<String>| {
            if let Some(s) = m.as_mut() {
                if !s.starts_with("primitive:") {
                    *s = join(Path::new(s.as_str())).to_string_lossy().into_owned();
                }
            }
        };
        join_mesh(&mut self.mesh);
        join_mesh(&mut self.target_mesh);
        join_mesh(&mut self.deformed);
        for t in &mut self.targets {
            if let Some(f) = t.token.strip_prefix('@') {
                t.token = format!("@{}", join(Path::new(f)).display());
            }
        }
        self.bank = self.bank.as_deref().map(join);
        self.dataset = self.dataset.as_deref().map(join);
        self.keyframes = self.keyframes.as_deref().map(join);
        self.images = self.images.iter().map(|p| join(p)).collect();
    }

    pub fn command(&self) -> Command {
        self.command.expect("command is set before validation")
    }

    /// Output directory after applying the output-root override.
    pub fn output_dir(&self) -> PathBuf {
        let out = self
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.command().name()));
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if out.is_relative() => PathBuf::from(root).join(out),
            _ => out,
        }
    }

    /// Checks everything that can be checked without loading inputs.
    pub fn validate(&self) -> Result<(), CliError> {
        let cmd = self.command.ok_or_else(|| bad("command", "missing"))?;
        let need = |field: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(bad(field, format!("required by {}", cmd.name())))
            }
        };
        if self.resolution == 0 {
            return Err(bad("resolution", "must be positive"));
        }
        if self.class_views == 0 {
            return Err(bad("class_views", "must be positive"));
        }
        if self.turntable_views == 0 {
            return Err(bad("turntable_views", "must be positive"));
        }
        for c in &self.classes {
            if Primitive::from_name(c).is_none() {
                return Err(bad("classes", format!("unknown primitive '{c}' (sphere, box, cone, ellipsoid)")));
            }
        }
        for (field, m) in [("mesh", &self.mesh), ("target_mesh", &self.target_mesh), ("deformed", &self.deformed)] {
            if let Some(name) = m.as_deref().and_then(|m| m.strip_prefix("primitive:")) {
                if Primitive::from_name(name).is_none() {
                    return Err(bad(field, format!("unknown primitive '{name}'")));
                }
            }
        }
        let weight = || -> Result<(), CliError> {
            match self.weight {
                Some(w) if (0.0..=1.0).contains(&w) => Ok(()),
                Some(w) => Err(bad("weight", format!("{w} outside [0, 1]"))),
                None => Err(bad("weight", format!("required by {}", cmd.name()))),
            }
        };
        match cmd {
            Command::GenDataset => need("classes", !self.classes.is_empty())?,
            Command::BuildBank => need("classes", self.dataset.is_some() || !self.classes.is_empty())?,
            Command::Deform => {
                need("mesh", self.mesh.is_some())?;
                need("targets", !self.targets.is_empty())?;
            }
            Command::Blend => {
                need("mesh", self.mesh.is_some())?;
                need("targets", !self.targets.is_empty())?;
                need("grid", !self.grid.is_empty())?;
                for (k, w) in self.grid.iter().enumerate() {
                    if w.len() != self.targets.len() {
                        return Err(bad(
                            &format!("grid[{k}]"),
                            format!("{} weights for {} targets", w.len(), self.targets.len()),
                        ));
                    }
                    let sum: f64 = w.iter().sum();
                    if w.iter().any(|x| !(*x >= 0.0)) || sum > 1.0 + 1e-9 {
                        return Err(bad(&format!("grid[{k}]"), format!("weights must be nonnegative and sum to at most 1, got {w:?}")));
                    }
                }
            }
            Command::Localize => {
                need("mesh", self.mesh.is_some())?;
                need("control", !self.control.is_empty())?;
                if self.targets.len() != 1 {
                    return Err(bad("targets", "localize takes exactly one target"));
                }
            }
            Command::SelfBlend => {
                need("mesh", self.mesh.is_some())?;
                weight()?;
                if self.targets.len() != 1 {
                    return Err(bad("targets", "self-blend takes exactly one target token"));
                }
            }
            Command::Invert => need("images", !self.images.is_empty())?,
            Command::MeshTarget => {
                need("mesh", self.mesh.is_some())?;
                need("target_mesh", self.target_mesh.is_some())?;
                weight()?;
            }
            Command::Interpolate => {
                need("keyframes", self.keyframes.is_some())?;
                need("s", !self.s.is_empty())?;
                if let Some(s) = self.s.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                    return Err(bad("s", format!("{s} outside [0, 1]")));
                }
            }
            Command::Verify => {
                need("mesh", self.mesh.is_some())?;
                need("deformed", self.deformed.is_some())?;
            }
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.token.is_empty() {
                return Err(bad(&format!("targets[{i}].token"), "empty token"));
            }
        }
        if matches!(cmd, Command::Deform | Command::Blend | Command::Localize | Command::SelfBlend | Command::Invert | Command::MeshTarget) {
            let mut spec = self.blend_spec(Vec::new());
            if cmd == Command::Deform {
                spec.targets = self
                    .targets
                    .iter()
                    .map(|t| BlendTarget {
                        token: PromptToken::Null,
                        weight: t.weight,
                        control: (!t.control.is_empty()).then(|| t.control.clone()),
                    })
                    .collect();
            }
            spec.validate().map_err(CliError::from)?;
        }
        Ok(())
    }

    /// The profile with every override applied; targets are filled in by
    /// the caller once tokens are resolved.
    pub fn blend_spec(&self, targets: Vec<BlendTarget>) -> BlendSpec {
        let mut spec = match self.profile {
            Profile::Desk => BlendSpec::desk(targets),
            Profile::Full => BlendSpec::full(targets),
        };
        let o = &self.optim;
        spec.seed = self.seed;
        spec.render.output = self.resolution;
        spec.render.raster = 2 * self.resolution;
        spec.rig.width = self.resolution;
        spec.rig.height = self.resolution;
        if let Some(v) = o.iterations {
            spec.iterations = v;
        }
        if let Some(v) = o.views {
            spec.views = v;
        }
        if let Some(v) = o.guidance_scale {
            spec.guidance_scale = v;
        }
        if let Some(v) = o.reg_weight {
            spec.reg_weight = v;
        }
        if let Some(v) = o.lr {
            spec.optimizer.lr = v;
        }
        if let Some(v) = o.modified_cfg {
            spec.modified_cfg = v;
        }
        if let Some(v) = o.roi_threshold {
            spec.roi_threshold = v;
        }
        spec
    }
}
