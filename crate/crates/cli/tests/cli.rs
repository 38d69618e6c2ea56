use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blendeform::image::Image;
use blendeform::mesh::shapes::Primitive;
use blendeform::mesh::{load_mesh, save_mesh};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blendeform"));
    c.env_remove("BLENDEFORM_OUTPUT_ROOT");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> PathBuf {
    let out = run(args, cwd);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

/// The single stderr line of a failed run, parsed.
fn failure(out: &Output) -> (i32, Value) {
    assert!(!out.status.success());
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    (out.status.code().unwrap(), serde_json::from_str(text.trim()).unwrap())
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn zero_weight_modified_guidance_returns_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    save_mesh(tmp.path().join("in.obj"), &Primitive::Sphere.mesh()).unwrap();
    let dir = ok(
        &["deform", "--mesh", "in.obj", "--target", "box=0", "--modified-cfg", "true", "--iterations", "20", "--output", "out"],
        tmp.path(),
    );
    let input = load_mesh(tmp.path().join("in.obj")).unwrap();
    let output = load_mesh(dir.join("deformed.obj")).unwrap();
    assert_eq!(input.vertices(), output.vertices());
    assert_eq!(manifest(&dir)["runs"][0]["history"].as_array().unwrap().len(), 20);
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        r#"
version = 1
command = "deform"
mesh = "primitive:sphere"
output = "out"
seed = 3
class_views = 8
targets = [{ token = "box", weight = 0.6 }, { token = "cone", weight = 0.4 }]

[optim]
iterations = 15
"#,
    )
    .unwrap();
    let dir = ok(&["deform", "--config", "run.toml"], tmp.path());
    let first = (fs::read(dir.join("manifest.json")).unwrap(), fs::read(dir.join("deformed.obj")).unwrap());
    ok(&["deform", "--config", "run.toml"], tmp.path());
    let second = (fs::read(dir.join("manifest.json")).unwrap(), fs::read(dir.join("deformed.obj")).unwrap());
    assert_eq!(first, second);
    let m = manifest(&dir);
    assert_eq!(m["seeds"]["seed"], 3);
    assert_eq!(m["spec"]["iterations"], 15);
    assert!(m["anchor"]["vertex"].is_u64());
    assert!(!String::from_utf8_lossy(&first.0).contains("timestamp"));

    // The resolved config reproduces the run from another directory.
    let elsewhere = tempfile::tempdir().unwrap();
    let resolved = dir.join("resolved.toml");
    ok(&["deform", "--config", resolved.to_str().unwrap()], elsewhere.path());
    assert_eq!(fs::read(dir.join("deformed.obj")).unwrap(), first.1);
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("run.toml"),
        "version = 1\nmesh = \"primitive:sphere\"\nclass_views = 8\ntargets = [{ token = \"box\", weight = 1.0 }]\n[optim]\niterations = 6\n",
    )
    .unwrap();
    let dir = ok(&["deform", "--config", "run.toml", "--iterations", "2", "--output", "o"], tmp.path());
    assert_eq!(manifest(&dir)["runs"][0]["history"].as_array().unwrap().len(), 2);
    assert_eq!(manifest(&dir)["config"]["optim"]["iterations"], 2);
}

#[test]
fn schema_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["deform", "--mesh", "primitive:sphere", "--target", "box=0.7", "--target", "cone=0.5"], tmp.path());
    let (code, rec) = failure(&out);
    assert_eq!(code, 2);
    assert_eq!(rec["error"], "config");
    assert_eq!(rec["field"], "targets.weight");
    assert!(rec["message"].as_str().unwrap().contains("1.2"));
    assert!(!tmp.path().join("runs").exists(), "nothing is written before validation");

    fs::write(tmp.path().join("a.toml"), "version = 1\nmesh = \"primitive:sphere\"\ncolour = 3\n").unwrap();
    let (code, rec) = failure(&run(&["deform", "--config", "a.toml"], tmp.path()));
    assert_eq!(code, 2);
    assert_eq!(rec["error"], "config_parse");
    assert!(rec["message"].as_str().unwrap().contains("colour"));

    fs::write(tmp.path().join("b.toml"), "version = 9\n").unwrap();
    let (_, rec) = failure(&run(&["deform", "--config", "b.toml"], tmp.path()));
    assert_eq!(rec["field"], "version");

    fs::write(tmp.path().join("c.toml"), "version = 1\ncommand = \"blend\"\n").unwrap();
    let (_, rec) = failure(&run(&["deform", "--config", "c.toml"], tmp.path()));
    assert_eq!(rec["field"], "command");

    let (_, rec) = failure(&run(&["localize", "--mesh", "primitive:sphere", "--target", "box=1"], tmp.path()));
    assert_eq!(rec["field"], "control");

    let (_, rec) = failure(&run(&["deform", "--mesh", "primitive:sphere", "--target", "torus=1"], tmp.path()));
    assert_eq!(rec["field"], "targets[0].token");
}

#[test]
fn module_failures_exit_nonzero_with_one_record() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, rec) = failure(&run(&["deform", "--mesh", "missing.obj", "--target", "box=1"], tmp.path()));
    assert_eq!(code, 1);
    assert_eq!(rec["error"], "io");
    let (code, rec) = failure(&run(&["verify", "--mesh", "primitive:sphere", "--deformed", "primitive:box"], tmp.path()));
    assert_eq!(code, 1);
    assert_eq!(rec["error"], "transfer_failed");
}

#[test]
fn dataset_generation_counts_sizes_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &'static str| vec!["gen-dataset", "--classes", "box,cone", "--class-views", "8", "--resolution", "32", "--seed", "5", "--output", out];
    let a = ok(&args("a"), tmp.path());
    let b = ok(&args("b"), tmp.path());
    let mut pngs = Vec::new();
    for class in ["box", "cone"] {
        for entry in fs::read_dir(a.join(class)).unwrap() {
            pngs.push(entry.unwrap().path());
        }
    }
    assert_eq!(pngs.len(), 16);
    for p in &pngs {
        assert_eq!(Image::read_png(p).unwrap().shape(), (32, 32));
        let twin = b.join(p.strip_prefix(&a).unwrap());
        assert_eq!(fs::read(p).unwrap(), fs::read(twin).unwrap());
    }
    let index: Value = serde_json::from_str(&fs::read_to_string(a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(index["classes"][1]["files"].as_array().unwrap().len(), 8);

    let bank_dir = ok(&["build-bank", "--dataset", "a", "--output", "bank"], tmp.path());
    let bank = blendeform::guidance::ExemplarBank::load(bank_dir.join("bank.bin")).unwrap();
    assert_eq!(bank.class_names(), ["box", "cone"]);
    let dir = ok(
        &["deform", "--mesh", "primitive:sphere", "--bank", "bank/bank.bin", "--target", "cone=1", "--iterations", "3", "--output", "d"],
        tmp.path(),
    );
    assert!(dir.join("deformed.obj").exists());
}

#[test]
fn output_root_variable_relocates_relative_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let out = bin()
        .args(["gen-dataset", "--classes", "sphere", "--class-views", "2", "--output", "ds"])
        .env("BLENDEFORM_OUTPUT_ROOT", &root)
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("ds/sphere/view_001.png").exists());
    assert!(!tmp.path().join("ds").exists());
}

#[test]
fn blend_then_interpolate_hits_the_keyframes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = ok(
        &["blend", "--mesh", "primitive:sphere", "--class-views", "8", "--target", "box=1", "--target", "cone=0",
          "--grid", "0.7,0.3", "--grid", "0.3,0.7", "--iterations", "4", "--output", "b"],
        tmp.path(),
    );
    assert_eq!(manifest(&dir)["runs"].as_array().unwrap().len(), 2);
    let sheet = Image::read_png(dir.join("contact_sheet.png")).unwrap();
    assert_eq!(sheet.shape(), (4 * 32, 2 * 32));
    let interp = ok(&["interpolate", "--keyframes", "b/keyframes", "--s", "0,1", "--output", "i"], tmp.path());
    for (k, file) in ["keyframe_000.obj", "keyframe_001.obj"].iter().enumerate() {
        let key = load_mesh(dir.join("keyframes").join(file)).unwrap();
        let got = load_mesh(interp.join(format!("interp_{k:03}.obj"))).unwrap();
        assert_eq!(key.vertices(), got.vertices());
        assert_eq!(key.faces(), got.faces());
    }
    let v = ok(&["verify", "--mesh", "primitive:sphere", "--deformed", "b/keyframes/keyframe_001.obj", "--output", "v"], tmp.path());
    let t: Value = serde_json::from_str(&fs::read_to_string(v.join("transfer.json")).unwrap()).unwrap();
    assert_eq!(t["passed"], true);
}

#[test]
fn localize_writes_roi_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = ok(
        &["localize", "--mesh", "primitive:sphere", "--class-views", "8", "--target", "box=1", "--control", "0,1,2,3",
          "--iterations", "6", "--turntable-views", "3", "--output", "l"],
        tmp.path(),
    );
    let roi: Value = serde_json::from_str(&fs::read_to_string(dir.join("roi.json")).unwrap()).unwrap();
    let n = Primitive::Sphere.mesh().vertex_count();
    assert_eq!(roi["normalized"].as_array().unwrap().len(), n);
    assert_eq!(roi["threshold"], 0.8);
    let normalized: Vec<f64> = serde_json::from_value(roi["normalized"].clone()).unwrap();
    let mask: Vec<bool> = serde_json::from_value(roi["mask"].clone()).unwrap();
    for (v, m) in normalized.iter().zip(&mask) {
        assert_eq!(*m, *v >= 0.8);
    }
    for k in 0..3 {
        assert!(dir.join(format!("roi_view_{k:02}.png")).exists());
    }
    assert!(dir.join("unconstrained.obj").exists());
    assert!(manifest(&dir)["anchor"]["vertex"].is_u64());
}

#[test]
fn token_and_adapter_workflows_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = ok(&["gen-dataset", "--classes", "box", "--class-views", "2", "--output", "ds"], tmp.path());
    let img = ds.join("box/view_000.png");
    let inv = ok(
        &["invert", "--class-views", "8", "--image", img.to_str().unwrap(), "--inversion-steps", "5", "--mesh", "primitive:sphere",
          "--iterations", "3", "--output", "inv"],
        tmp.path(),
    );
    let token: Value = serde_json::from_str(&fs::read_to_string(inv.join("token.json")).unwrap()).unwrap();
    assert_eq!(token["kind"], "inverted");
    assert!(inv.join("deformed.obj").exists());
    let again = ok(
        &["deform", "--mesh", "primitive:sphere", "--class-views", "8", "--target", "@inv/token.json=1", "--iterations", "3", "--output", "again"],
        tmp.path(),
    );
    assert_eq!(fs::read(again.join("deformed.obj")).unwrap(), fs::read(inv.join("deformed.obj")).unwrap());

    let mt = ok(
        &["mesh-target", "--mesh", "primitive:sphere", "--target-mesh", "primitive:box", "--weight", "0.5", "--class-views", "8",
          "--finetune-iterations", "2", "--iterations", "3", "--output", "mt"],
        tmp.path(),
    );
    let bank = blendeform::guidance::ExemplarBank::load(mt.join("bank.bin")).unwrap();
    assert_eq!(bank.adapters().len(), 1);

    let sb = ok(
        &["self-blend", "--mesh", "primitive:sphere", "--class-views", "8", "--target", "box=1", "--weight", "0", "--iterations", "5", "--output", "sb"],
        tmp.path(),
    );
    assert_eq!(load_mesh(sb.join("deformed.obj")).unwrap().vertices(), Primitive::Sphere.mesh().vertices());
}
