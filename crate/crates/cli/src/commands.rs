use std::path::{Path, PathBuf};

use deformsplat::gradcheck::{self, GradcheckConfig};
use deformsplat::inpaint::{
    decode_latents, encode_frames, encode_masks, inpaint_clip, DiffusionSchedule, LatentClip, TinyConfig,
    TinyPredictor,
};
use deformsplat::metrics::{evaluate, temporal_consistency};
use deformsplat::raster;
use deformsplat::sceneio::{
    load_checkpoint, mask_path, read_cameras, read_dataset, read_frames, read_json, read_mask_png, save_checkpoint,
    synth_generate, write_cameras, write_dataset, write_frames, write_json, Checkpoint, Dataset, SyntheticSceneSpec,
};
use deformsplat::train::{StepLog, Trainer};
use deformsplat::{Frame, TrainConfig};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{parse_file, GradcheckSettings, InpaintSettings};
use crate::error::CliError;

pub fn synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec: SyntheticSceneSpec = parse_file(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scene = synth_generate(&spec)?;
    write_dataset(out, &Dataset::new(scene.frames.clone(), scene.cameras.clone())?)?;
    let clean: Vec<Frame> = scene
        .frames
        .iter()
        .zip(scene.clean_rgb.iter().zip(&scene.gt_depth))
        .map(|(f, (rgb, depth))| Frame::new(rgb.clone(), depth.clone(), f.mask.clone(), f.time))
        .collect::<Result<_, _>>()?;
    let clean_dir = out.join("clean");
    write_frames(&clean_dir, &clean)?;
    write_cameras(&clean_dir, &scene.cameras)?;
    write_json(&out.join("spec.json"), &spec)?;
    eprintln!("wrote {} frames to {}", scene.frames.len(), out.display());
    Ok(())
}

fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn write_log(path: &Path, log: &[StepLog]) -> Result<(), CliError> {
    let mut text = String::new();
    for e in log {
        text.push_str(&serde_json::to_string(e).expect("plain struct"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| deformsplat::Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

pub fn train(data: &Path, out: &Path, log: Option<&Path>, cfg: TrainConfig) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = read_dataset(data)?;
    let mut trainer = Trainer::from_frames(&ds.frames, &ds.cameras, cfg.clone())?;
    let log_path = log.map_or_else(|| default_log_path(out), Path::to_path_buf);
    let mut entries = Vec::with_capacity(cfg.iterations);
    let result = trainer.run_with(&ds.frames, &ds.cameras, |_, e| entries.push(*e));
    write_log(&log_path, &entries)?;
    let report = result?;
    let config_json = serde_json::to_string(&cfg).expect("plain struct");
    save_checkpoint(
        out,
        &Checkpoint {
            scene: trainer.scene.clone(),
            optimizer: Some(trainer.optimizer().to_vec()),
            config_json,
        },
    )?;
    if let Some(last) = report.log.last() {
        eprintln!(
            "trained {} iterations: L={:.6} L_rgb={:.6} L_depth={:.6} gaussians={}",
            report.log.len(),
            last.loss,
            last.loss_rgb,
            last.loss_depth,
            trainer.scene.len()
        );
    }
    Ok(())
}

fn parse_time(t: &str) -> Result<Option<f64>, CliError> {
    if t == "all" {
        return Ok(None);
    }
    let v: f64 = t
        .parse()
        .map_err(|_| CliError::Usage(format!("--t expects a number in [0, 1] or `all`, got `{t}`")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(CliError::Usage(format!("--t {v} is outside [0, 1]")));
    }
    Ok(Some(v))
}

pub fn render(ckpt: &Path, data: &Path, t: &str, out: &Path) -> Result<(), CliError> {
    let time = parse_time(t)?;
    let checkpoint = load_checkpoint(ckpt)?;
    let cameras = read_cameras(data)?;
    let times: Vec<f64> = read_json(&data.join("times.json"))?;
    if times.len() != cameras.len() || cameras.is_empty() {
        return Err(CliError::Usage(format!(
            "{}: {} timestamps for {} cameras",
            data.display(),
            times.len(),
            cameras.len()
        )));
    }
    let jobs: Vec<(f64, usize)> = match time {
        None => times.iter().copied().zip(0..).collect(),
        Some(v) => {
            let nearest = (0..times.len())
                .min_by(|&a, &b| (times[a] - v).abs().total_cmp(&(times[b] - v).abs()))
                .expect("non-empty");
            vec![(v, nearest)]
        }
    };
    let mut frames = Vec::with_capacity(jobs.len());
    let mut cams = Vec::with_capacity(jobs.len());
    for &(time, cam) in &jobs {
        let gaussians = checkpoint.scene.at_time(time)?;
        let img = raster::render(&gaussians, &cameras[cam]);
        let mask = Array2::from_elem(img.depth.dim(), false);
        frames.push(Frame::new(img.color, img.depth, mask, time)?);
        cams.push(cameras[cam].clone());
    }
    write_frames(out, &frames)?;
    write_cameras(out, &cams)?;
    let train_config: serde_json::Value = serde_json::from_str(&checkpoint.config_json).unwrap_or(serde_json::Value::Null);
    write_json(
        &out.join("render_config.json"),
        &json!({
            "checkpoint": ckpt,
            "data": data,
            "t": t,
            "train_config": train_config,
        }),
    )?;
    eprintln!("rendered {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn read_masks(dir: &Path, count: usize) -> Result<Vec<Array2<bool>>, CliError> {
    (0..count)
        .map(|i| {
            let p = mask_path(dir, i);
            if !p.exists() {
                return Err(CliError::Usage(format!("missing mask {}", p.display())));
            }
            Ok(read_mask_png(&p)?)
        })
        .collect()
}

pub fn eval(pred: &Path, gt: &Path, masked: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let p = read_frames(pred)?;
    let g = read_frames(gt)?;
    if p.len() != g.len() {
        return Err(CliError::Usage(format!(
            "{} predicted frames vs {} ground-truth frames",
            p.len(),
            g.len()
        )));
    }
    let masks = masked.map(|d| read_masks(d, p.len())).transpose()?;
    let report = evaluate(&p, &g, masks.as_deref())?;
    let mut value = serde_json::to_value(&report).expect("plain struct");
    value["config"] = json!({
        "pred": pred,
        "gt": gt,
        "masked": masked,
    });
    write_json(out, &value)?;
    println!("{}", serde_json::to_string_pretty(&value).expect("json value"));
    Ok(())
}

/// Clips of the input with random rectangular occlusions, used to fit the
/// predictor to the clip's own statistics.
fn training_clips(latents: &Array4<f64>, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<LatentClip>, CliError> {
    let (f, _, h, w) = latents.dim();
    (0..count)
        .map(|_| {
            let bh = rng.random_range(1..=h.max(2) / 2).min(h);
            let bw = rng.random_range(1..=w.max(2) / 2).min(w);
            let y0 = rng.random_range(0..=h - bh);
            let x0 = rng.random_range(0..=w - bw);
            let mask = Array4::from_shape_fn((f, 1, h, w), |(_, _, y, x)| {
                if (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            });
            Ok(LatentClip::new(latents.clone(), mask)?)
        })
        .collect()
}

pub fn inpaint_sim(data: &Path, out: &Path, cfg: &InpaintSettings) -> Result<(), CliError> {
    let frames = read_frames(data)?;
    let rgbs: Vec<_> = frames.iter().map(|f| f.rgb.clone()).collect();
    let masks: Vec<_> = frames.iter().map(|f| f.mask.clone()).collect();
    let latents = encode_frames(&rgbs)?;
    let mask = encode_masks(&masks)?;
    let clip = LatentClip::new(latents.clone(), mask)?;
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut predictor = TinyPredictor::new(TinyConfig {
        channels: latents.dim().1,
        hidden: cfg.hidden,
        head_dim: cfg.head_dim,
        seed: cfg.seed,
    });
    let clips = training_clips(&latents, cfg.train_clips.max(1), &mut rng)?;
    let log = predictor.train(&clips, &schedule, cfg.train_iters, cfg.lr, cfg.seed ^ 1)?;
    let result = inpaint_clip(&clip, &predictor, &schedule, cfg.steps, cfg.seed ^ 2)?;
    let decoded = decode_latents(&result.latents);
    let out_frames: Vec<Frame> = frames
        .iter()
        .zip(decoded)
        .map(|(f, dec)| {
            let mut rgb = f.rgb.clone();
            for ((y, x, c), v) in rgb.indexed_iter_mut() {
                if f.mask[[y, x]] {
                    *v = dec[[y, x, c]];
                }
            }
            Frame::new(rgb, f.depth.clone(), f.mask.clone(), f.time)
        })
        .collect::<Result<_, _>>()?;
    write_frames(out, &out_frames)?;
    let out_rgb: Vec<_> = out_frames.iter().map(|f| f.rgb.clone()).collect();
    let tc = if out_rgb.len() >= 2 { Some(temporal_consistency(&out_rgb)?) } else { None };
    write_json(
        &out.join("inpaint.json"),
        &json!({
            "config": cfg,
            "no_op": result.no_op,
            "masked_latents": clip.masked_count(),
            "train_loss_first": log.losses.first(),
            "train_loss_last": log.losses.last(),
            "tc": tc,
        }),
    )?;
    if result.no_op {
        eprintln!("mask is empty: clip copied unchanged");
    }
    eprintln!("wrote {} frames to {}", out_frames.len(), out.display());
    Ok(())
}

pub fn gradcheck(cfg: &GradcheckSettings, inject_fault: bool) -> Result<(), CliError> {
    let report = gradcheck::run(&GradcheckConfig {
        seed: cfg.seed,
        splats: cfg.splats,
        resolution: cfg.res,
        basis: cfg.basis,
        deform: cfg.deform,
        step: cfg.step,
        inject_fault,
    })?;
    for g in &report.groups {
        println!(
            "{:<14} checked {:>5} skipped {:>3} max_rel {:.3e} max_abs_small {:.3e}",
            g.group.name(),
            g.checked,
            g.skipped,
            g.max_rel_error,
            g.max_small_abs_error
        );
    }
    println!(
        "skipped fraction {:.4} ({} of {})",
        report.skipped_fraction(),
        report.skipped(),
        report.checked() + report.skipped()
    );
    if report.passed() {
        println!("PASS");
        return Ok(());
    }
    let detail = match report.worst() {
        Some((group, s)) => format!(
            "worst offender: group {} splat {} coordinate {} analytic {:.6e} numeric {:.6e}",
            group.name(),
            s.splat,
            s.coordinate,
            s.analytic,
            s.numeric
        ),
        None => "too many coordinates skipped".into(),
    };
    println!("FAIL {detail}");
    Err(CliError::CheckFailed(detail))
}
