use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deformsplat::raster::render;
use deformsplat::sceneio::{
    depth_path, load_checkpoint, pfm_bytes, read_cameras, read_frames, rgb_path, save_checkpoint, Checkpoint,
};
use deformsplat::{DeformField, Gaussian2D, Scene, SplatParams, TrainConfig};
use nalgebra::Vector3;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deformsplat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FLAT_SPEC: &str = r#"
width = 32
height = 32
frames = 10

[surface]
z0 = 50.0
"#;

const BUMP_SPEC: &str = r#"
width = 32
height = 32
frames = 4
fov_deg = 50.0
paint_instruments = true

[surface]
z0 = 50.0
bumps = [{ center = [0.0, 0.0], amplitude = 4.0, sigma = 8.0, frequency = 1.0 }]

[[instruments]]
start = [4.0, 20.0]
end = [14.0, 24.0]
radius = 3.0
velocity = [6.0, -4.0]
"#;

fn synth(dir: &Path, spec: &str, name: &str, extra: &[&str]) -> PathBuf {
    let spec_path = dir.join(format!("{name}.toml"));
    fs::write(&spec_path, spec).unwrap();
    let out = dir.join(name);
    let mut args = vec!["synth", "--spec", s(&spec_path), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn version_names_format_versions() {
    let o = run(&["--version"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("checkpoint format 1") && text.contains("dataset layout 1"), "{text}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&run(&["gradcheck", "--bogus"])), 2);
    assert_eq!(code(&run(&["synth", "--out", "x"])), 2);
    assert_eq!(code(&run(&["synth", "--spec", "/nonexistent/spec.toml", "--out", "x"])), 2);
}

#[test]
fn synth_flat_plane_writes_ten_frames_deterministically() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), FLAT_SPEC, "a", &["--seed", "3"]);
    let b = synth(tmp.path(), FLAT_SPEC, "b", &["--seed", "3"]);
    let frames = read_frames(&a).unwrap();
    assert_eq!(frames.len(), 10);
    assert_eq!(read_cameras(&a).unwrap().len(), 10);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let spec: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec["seed"], 3);
}

#[test]
fn synth_rejects_bad_spec() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path().join("bad.toml");
    fs::write(&p, "width = 32\nheight = 32\nframes = 2\n[surface]\nz0 = 4.0\nbumps = [{ center = [0.0, 0.0], amplitude = 2.0, sigma = 1.0, frequency = 1.0 }]\n").unwrap();
    assert_eq!(code(&run(&["synth", "--spec", s(&p), "--out", s(&tmp.path().join("o"))])), 2);
    fs::write(&p, "width = \"wide\"").unwrap();
    assert_eq!(code(&run(&["synth", "--spec", s(&p), "--out", s(&tmp.path().join("o"))])), 2);
}

fn echoed_config(ckpt: &Path) -> TrainConfig {
    serde_json::from_str(&load_checkpoint(ckpt).unwrap().config_json).unwrap()
}

#[test]
fn train_smoke_run_logs_every_iteration() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), BUMP_SPEC, "data", &[]);
    let ckpt = tmp.path().join("model.d2gs");
    let o = run(&["train", "--data", s(&data), "--out", s(&ckpt), "--iters", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(tmp.path().join("model.d2gs.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["L"].is_f64() && v["L_rgb"].is_f64() && v["L_depth"].is_f64() && v["lambda"].is_f64());
    }
    let expected = TrainConfig {
        iterations: 10,
        densify_freeze_iters: 9,
        ..TrainConfig::default()
    };
    assert_eq!(echoed_config(&ckpt), expected);
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), BUMP_SPEC, "data", &[]);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "seed = 5\n[train]\niterations = 4\nlr_color = 0.01\nbasis = 2\n").unwrap();
    let ckpt = tmp.path().join("m.d2gs");
    let o = run(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&ckpt), "--iters", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let c = echoed_config(&ckpt);
    assert_eq!((c.iterations, c.lr_color, c.basis, c.seed), (3, 0.01, 2, 5));
    let o = run(&["--config", s(&cfg), "--seed", "8", "train", "--data", s(&data), "--out", s(&ckpt), "--iters", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(echoed_config(&ckpt).seed, 8);
    fs::write(&cfg, "[train]\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&run(&["--config", s(&cfg), "gradcheck", "--splats", "1"])), 2);
}

#[test]
fn training_is_independent_of_thread_count() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), BUMP_SPEC, "data", &[]);
    let a = tmp.path().join("a.d2gs");
    let b = tmp.path().join("b.d2gs");
    for (ckpt, threads) in [(&a, "1"), (&b, "4")] {
        let o = run(&["--threads", threads, "--seed", "2", "train", "--data", s(&data), "--out", s(ckpt), "--iters", "15"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn exploding_updates_exit_with_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), BUMP_SPEC, "data", &[]);
    let cfg = tmp.path().join("boom.toml");
    fs::write(&cfg, "[train]\nlr_scale = 1e6\n").unwrap();
    let ckpt = tmp.path().join("m.d2gs");
    let o = run(&["--config", s(&cfg), "train", "--data", s(&data), "--out", s(&ckpt), "--iters", "20"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss"));
}

fn zero_deform_checkpoint(path: &Path) -> Scene {
    let params = (0..12)
        .map(|i| {
            SplatParams::from_gaussian(&Gaussian2D {
                center: Vector3::new(i as f64 * 1.5 - 8.0, (i % 3) as f64 * 2.0 - 2.0, 50.0),
                tangent_u: Vector3::x(),
                tangent_v: Vector3::y(),
                scale_u: 1.5,
                scale_v: 1.0,
                opacity: 0.8,
                color: Vector3::new(0.2 + 0.05 * i as f64, 0.5, 0.7),
            })
        })
        .collect();
    let scene = Scene::new(params, Some(DeformField::identity(12, 4))).unwrap();
    save_checkpoint(
        path,
        &Checkpoint {
            scene: scene.clone(),
            optimizer: None,
            config_json: "{}".into(),
        },
    )
    .unwrap();
    scene
}

#[test]
fn render_matches_in_memory_scene() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), FLAT_SPEC, "data", &[]);
    let ckpt = tmp.path().join("zero.d2gs");
    let scene = zero_deform_checkpoint(&ckpt);
    let cams = read_cameras(&data).unwrap();

    let out = tmp.path().join("r0");
    assert_eq!(code(&run(&["render", "--ckpt", s(&ckpt), "--data", s(&data), "--t", "0", "--out", s(&out)])), 0);
    let static_render = render(&scene.canonical().unwrap(), &cams[0]);
    assert_eq!(fs::read(depth_path(&out, 0)).unwrap(), pfm_bytes(&static_render.depth));
    assert!(!rgb_path(&out, 1).exists());

    let all = tmp.path().join("all");
    assert_eq!(code(&run(&["render", "--ckpt", s(&ckpt), "--data", s(&data), "--t", "all", "--out", s(&all)])), 0);
    let frames = read_frames(&all).unwrap();
    assert_eq!(frames.len(), 10);
    for (i, f) in frames.iter().enumerate() {
        let r = render(&scene.at_time(f.time).unwrap(), &cams[i]);
        assert_eq!(fs::read(depth_path(&all, i)).unwrap(), pfm_bytes(&r.depth));
    }
    let o = run(&["render", "--ckpt", s(&ckpt), "--data", s(&data), "--t", "1.5", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

fn schema() -> serde_json::Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/metric_report.schema.json");
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn eval_identical_sequences() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), BUMP_SPEC, "data", &[]);
    let report = tmp.path().join("report.json");
    let o = run(&["eval", "--pred", s(&data), "--gt", s(&data), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["psnr_db"], 99.0);
    assert_eq!(v["ssim_pct"], 100.0);
    assert_eq!(v["depth_rmse"], 0.0);
    assert_eq!(v["tcs"], 0.0);
    assert!(v.get("masked").is_none());
    let validator = jsonschema::validator_for(&schema()).unwrap();
    assert!(validator.is_valid(&v));

    let masked = tmp.path().join("masked.json");
    let o = run(&["eval", "--pred", s(&data), "--gt", s(&data), "--masked", s(&data), "--out", s(&masked)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&masked).unwrap()).unwrap();
    assert!(m["masked"].is_object());
    assert!(validator.is_valid(&m));

    let mut broken = m.clone();
    broken["lpips"] = serde_json::json!(0.1);
    assert!(!validator.is_valid(&broken));
}

#[test]
fn eval_rejects_count_mismatch() {
    let tmp = TempDir::new().unwrap();
    let a = synth(tmp.path(), BUMP_SPEC, "a", &[]);
    let b = synth(tmp.path(), FLAT_SPEC, "b", &[]);
    let o = run(&["eval", "--pred", s(&a), "--gt", s(&b), "--out", s(&tmp.path().join("r.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn inpaint_sim_preserves_visible_pixels() {
    let tmp = TempDir::new().unwrap();
    let data = synth(tmp.path(), BUMP_SPEC, "data", &[]);
    let out = tmp.path().join("filled");
    let o = run(&["--seed", "4", "inpaint-sim", "--data", s(&data), "--out", s(&out), "--train-iters", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let input = read_frames(&data).unwrap();
    let output = read_frames(&out).unwrap();
    assert_eq!(input.len(), output.len());
    let mut masked = 0;
    for (a, b) in input.iter().zip(&output) {
        for ((y, x, c), v) in a.rgb.indexed_iter() {
            if a.mask[[y, x]] {
                masked += 1;
            } else {
                assert_eq!(*v, b.rgb[[y, x, c]]);
            }
        }
    }
    assert!(masked > 0);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("inpaint.json")).unwrap()).unwrap();
    assert_eq!(summary["no_op"], false);
    assert_eq!(summary["config"]["seed"], 4);

    let again = tmp.path().join("again");
    let o = run(&["--seed", "4", "inpaint-sim", "--data", s(&data), "--out", s(&again), "--train-iters", "20"]);
    assert_eq!(code(&o), 0);
    assert_eq!(dir_bytes(&out), dir_bytes(&again));
}

#[test]
fn gradcheck_exit_codes() {
    let o = run(&["gradcheck", "--splats", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = run(&["gradcheck", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("deform_weight") && text.contains("PASS"));
    let o = run(&["gradcheck", "--splats", "5", "--inject-gradient-fault"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("worst offender"));
}
