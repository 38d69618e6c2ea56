//! `blendeform` command-line tool. Every subcommand reads an optional TOML
//! config and applies flag overrides on top; flags win.

mod config;
mod error;
mod workflows;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};

use config::{Command, Profile, RunConfig, TargetConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "blendeform", version, about = "Concept-blending mesh deformation")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args, Default)]
struct Flags {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bank_seed: Option<u64>,
    /// OBJ path or primitive:<name>
    #[arg(long)]
    mesh: Option<String>,
    #[arg(long)]
    target_mesh: Option<String>,
    #[arg(long)]
    deformed: Option<String>,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Primitive classes (comma separated)
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long)]
    class_views: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// TOKEN=WEIGHT; repeat for several targets
    #[arg(long = "target", value_parser = parse_target)]
    targets: Vec<TargetConfig>,
    /// Control vertices (comma separated)
    #[arg(long, value_delimiter = ',')]
    control: Option<Vec<usize>>,
    /// One weight vector per keyframe, comma separated; repeat per keyframe
    #[arg(long = "grid", value_parser = parse_weights)]
    grid: Vec<Vec<f64>>,
    #[arg(long)]
    weight: Option<f64>,
    #[arg(long = "image")]
    images: Vec<PathBuf>,
    #[arg(long)]
    keyframes: Option<PathBuf>,
    /// Interpolation parameters (comma separated)
    #[arg(long, value_delimiter = ',')]
    s: Option<Vec<f64>>,
    #[arg(long)]
    segment: Option<usize>,
    #[arg(long)]
    turntable_views: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Views per iteration
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    reg_weight: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    modified_cfg: Option<bool>,
    #[arg(long)]
    roi_threshold: Option<f64>,
    #[arg(long)]
    finetune_iterations: Option<usize>,
    #[arg(long)]
    inversion_steps: Option<usize>,
}

fn parse_target(s: &str) -> Result<TargetConfig, String> {
    let (token, w) = s.rsplit_once('=').ok_or("expected TOKEN=WEIGHT")?;
    let weight = w.parse::<f64>().map_err(|e| format!("weight '{w}': {e}"))?;
    Ok(TargetConfig {
        token: token.to_string(),
        weight,
        control: Vec::new(),
    })
}

fn parse_weights(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("weight '{x}': {e}")))
        .collect()
}

fn resolve(command: Command, f: Flags) -> Result<RunConfig, CliError> {
    let mut cfg = match &f.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cfg.command {
        Some(c) if c != command => {
            return Err(CliError::Config {
                field: "command".into(),
                message: format!("config is for {}, invoked as {}", c.name(), command.name()),
            })
        }
        _ => cfg.command = Some(command),
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = f.$flag { cfg.$($field).+ = v; })*
        };
    }
    macro_rules! set_opt {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = f.$flag { cfg.$($field).+ = Some(v); })*
        };
    }
    set!(profile => profile, seed => seed, bank_seed => bank_seed, classes => classes,
        class_views => class_views, resolution => resolution, control => control, s => s,
        segment => segment, turntable_views => turntable_views);
    set_opt!(output => output, mesh => mesh, target_mesh => target_mesh, deformed => deformed,
        bank => bank, dataset => dataset, weight => weight, keyframes => keyframes,
        iterations => optim.iterations, views => optim.views, guidance_scale => optim.guidance_scale,
        reg_weight => optim.reg_weight, lr => optim.lr, modified_cfg => optim.modified_cfg,
        roi_threshold => optim.roi_threshold, finetune_iterations => optim.finetune_iterations,
        inversion_steps => optim.inversion_steps);
    if !f.targets.is_empty() {
        cfg.targets = f.targets;
    }
    if !f.grid.is_empty() {
        cfg.grid = f.grid;
    }
    if !f.images.is_empty() {
        cfg.images = f.images;
    }
    cfg.validate()?;
    cfg.absolutize()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(cli.command, cli.flags).and_then(|cfg| workflows::run(&cfg));
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
