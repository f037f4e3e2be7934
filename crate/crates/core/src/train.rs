//! Optimization loop: point-cloud initialization from depth, Adam updates
//! per parameter group, adaptive depth weighting and densification.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deform::{DeformField, CHANNELS};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::MetricReport;
use crate::optim::Adam;
use crate::pipeline::{scene_backward, scene_forward, SceneGrad};
use crate::primitive::{sigmoid, Gaussian2D, SplatParams};
use crate::raster::{Rasterizer, RenderOutput};
use crate::scene::{Aabb, Scene};
use crate::sched::{total_loss, AdaptiveWeightState, LossKind, ScheduleConfig};

/// Training hyperparameters. Every optimizer group has its own learning
/// rate; the position rate is multiplied by the scene extent and decays
/// exponentially to `lr_final_fraction` of its start value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_init: f64,
    pub lr_final_fraction: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub lr_deform: f64,
    pub densify_freeze_iters: usize,
    pub densify_interval: usize,
    /// Last iteration that may densify; `None` means half the run.
    pub densify_until: Option<usize>,
    pub densify_grad_threshold: f64,
    pub prune_opacity_threshold: f64,
    /// Splats larger than this fraction of the scene extent are split
    /// rather than cloned.
    pub split_extent_fraction: f64,
    pub split_factor: f64,
    pub max_splats: usize,
    pub init_count: usize,
    /// Basis functions per deformation bank; 0 disables deformation.
    pub basis: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            lr_init: 3.2e-3,
            lr_final_fraction: 0.1,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 2.5e-3,
            lr_deform: 1.6e-3,
            densify_freeze_iters: 600,
            densify_interval: 100,
            densify_until: None,
            densify_grad_threshold: 2e-4,
            prune_opacity_threshold: 5e-3,
            split_extent_fraction: 0.01,
            split_factor: 1.6,
            max_splats: 8000,
            init_count: 4000,
            basis: crate::deform::DEFAULT_BASIS,
            seed: 0,
            schedule: ScheduleConfig::default(),
            loss: LossKind::L1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        let rates = [
            self.lr_init,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_color,
            self.lr_deform,
        ];
        if self.densify_freeze_iters >= self.iterations {
            return bad(format!(
                "densify freeze {} must be below the iteration count {}",
                self.densify_freeze_iters, self.iterations
            ));
        }
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad("lr_final_fraction must be in (0, 1]".into());
        }
        if self.densify_interval == 0 || !(self.split_factor > 1.0) || self.init_count == 0 {
            return bad("densify interval, split factor and init count must be positive".into());
        }
        self.schedule.validate()
    }

    pub fn densify_until(&self) -> usize {
        self.densify_until.unwrap_or(self.iterations / 2)
    }

    /// Position learning rate at `iteration` before scaling by the extent.
    pub fn position_lr(&self, iteration: usize) -> f64 {
        let span = (self.iterations.max(2) - 1) as f64;
        let s = (iteration as f64 / span).min(1.0);
        self.lr_init * self.lr_final_fraction.powf(s)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_rgb")]
    pub loss_rgb: f64,
    #[serde(rename = "L_depth")]
    pub loss_depth: f64,
    pub lambda: f64,
    pub count: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DensifyStats {
    pub iteration: usize,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub densify: Vec<DensifyStats>,
    pub scene_extent: f64,
    pub final_metrics: Option<MetricReport>,
}

impl TrainReport {
    /// Line-delimited JSON, one record per iteration.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.log {
            s.push_str(&serde_json::to_string(e).expect("plain struct"));
            s.push('\n');
        }
        s
    }
}

/// Half the diagonal of the point bounds, with a floor for degenerate
/// clouds.
pub fn scene_extent(bounds: &Aabb) -> f64 {
    (0.5 * bounds.extent()).max(1e-6)
}

/// Back-projects valid depth pixels of the first frame that has any, then
/// draws `target_count` of them without replacement. Each splat faces the
/// local depth surface and its scales follow the sample spacing.
pub fn init_pointcloud(frames: &[Frame], cams: &[Camera], target_count: usize, seed: u64) -> Result<Scene> {
    if frames.len() != cams.len() {
        return Err(Error::ShapeMismatch("one camera per frame required".into()));
    }
    let (frame, cam) = frames
        .iter()
        .zip(cams)
        .find(|(f, _)| f.valid_depth_count() > 0)
        .ok_or_else(|| Error::Initialization("no frame has valid depth".into()))?;
    let (h, w) = frame.depth.dim();
    let valid: Vec<(usize, usize)> = frame
        .depth
        .indexed_iter()
        .filter(|(_, d)| d.is_finite() && **d > 0.0)
        .map(|(idx, _)| idx)
        .collect();
    if valid.is_empty() {
        return Err(Error::Initialization("no positive finite depth".into()));
    }
    let n = target_count.min(valid.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, valid.len(), n).into_vec();
    picks.sort_unstable();
    let spacing_factor = (valid.len() as f64 / n as f64).sqrt();
    let point = |y: usize, x: usize| -> Option<Vector3<f64>> {
        let d = frame.depth[[y, x]];
        (d.is_finite() && d > 0.0).then(|| cam.unproject(x as f64, y as f64, d))
    };
    let rot_t = cam.rotation().transpose();
    let params = picks
        .into_iter()
        .map(|k| {
            let (y, x) = valid[k];
            let p = point(y, x).expect("valid pixel");
            let step = |dy: isize, dx: isize| -> Option<Vector3<f64>> {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    return None;
                }
                point(yy as usize, xx as usize).map(|q| (q - p) * (dx + dy).signum() as f64)
            };
            let du = step(0, 1).or_else(|| step(0, -1)).unwrap_or_else(|| rot_t * Vector3::x() * frame.depth[[y, x]] / cam.fx);
            let dv = step(1, 0).or_else(|| step(-1, 0)).unwrap_or_else(|| rot_t * Vector3::y() * frame.depth[[y, x]] / cam.fy);
            let (tu, tv) = crate::primitive::orthonormalize_frame(&du, &dv)
                .unwrap_or_else(|_| (rot_t * Vector3::x(), rot_t * Vector3::y()));
            let su = (0.6 * du.norm() * spacing_factor).max(1e-6);
            let sv = (0.6 * dv.norm() * spacing_factor).max(1e-6);
            let color = Vector3::new(frame.rgb[[y, x, 0]], frame.rgb[[y, x, 1]], frame.rgb[[y, x, 2]]);
            SplatParams::from_gaussian(&Gaussian2D {
                center: p,
                tangent_u: tu,
                tangent_v: tv,
                scale_u: su,
                scale_v: sv,
                opacity: 0.5,
                color,
            })
        })
        .collect();
    Scene::new(params, None)
}

/// Adam groups in checkpoint order.
pub const GROUP_NAMES: [&str; 8] = [
    "position",
    "rotation",
    "scale",
    "opacity",
    "color",
    "deform_weight",
    "deform_center",
    "deform_width",
];

const G_POS: usize = 0;
const G_ROT: usize = 1;
const G_SCALE: usize = 2;
const G_OPACITY: usize = 3;
const G_COLOR: usize = 4;
const G_DEFORM: usize = 5;

fn group_widths(basis: usize) -> [usize; 8] {
    let b = CHANNELS * basis;
    [3, 6, 2, 1, 3, b, b, b]
}

fn gather(params: &[SplatParams], group: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.len() * 6);
    for p in params {
        match group {
            G_POS => out.extend_from_slice(p.position.as_slice()),
            G_ROT => {
                out.extend_from_slice(p.frame_u.as_slice());
                out.extend_from_slice(p.frame_v.as_slice());
            }
            G_SCALE => out.extend_from_slice(&p.log_scale),
            G_OPACITY => out.push(p.opacity_logit),
            G_COLOR => out.extend_from_slice(p.color.as_slice()),
            _ => unreachable!("not a splat group"),
        }
    }
    out
}

fn scatter(params: &mut [SplatParams], group: usize, flat: &[f64]) {
    for (i, p) in params.iter_mut().enumerate() {
        match group {
            G_POS => p.position = Vector3::from_column_slice(&flat[3 * i..3 * i + 3]),
            G_ROT => {
                p.frame_u = Vector3::from_column_slice(&flat[6 * i..6 * i + 3]);
                p.frame_v = Vector3::from_column_slice(&flat[6 * i + 3..6 * i + 6]);
            }
            G_SCALE => p.log_scale = [flat[2 * i], flat[2 * i + 1]],
            G_OPACITY => p.opacity_logit = flat[i],
            G_COLOR => p.color = Vector3::from_column_slice(&flat[3 * i..3 * i + 3]),
            _ => unreachable!("not a splat group"),
        }
    }
}

fn fresh_optimizer(scene: &Scene) -> Vec<Adam> {
    let basis = scene.deform.as_ref().map_or(0, |d| d.basis());
    group_widths(basis).iter().map(|w| Adam::new(w * scene.len())).collect()
}

/// Clones or splits splats whose mean screen gradient exceeds the
/// threshold, largest gradients first while the count stays within
/// `max_splats`, then prunes near-transparent ones. Optimizer rows and
/// deformation banks follow their splats; new rows start with zero moments.
#[allow(clippy::too_many_arguments)]
pub fn densify_and_prune(
    scene: &mut Scene,
    optimizer: &mut [Adam],
    mean_grad: &[f64],
    config: &TrainConfig,
    extent: f64,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> DensifyStats {
    let n = scene.len();
    assert_eq!(mean_grad.len(), n);
    let basis = scene.deform.as_ref().map_or(0, |d| d.basis());
    let widths = group_widths(basis);
    let mut stats = DensifyStats {
        iteration,
        ..DensifyStats::default()
    };
    let mut remove = vec![false; n];
    let split_bound = config.split_extent_fraction * extent;
    let mut added = 0usize;
    let mut candidates: Vec<usize> = (0..n).filter(|&i| mean_grad[i] > config.densify_grad_threshold).collect();
    candidates.sort_by(|&a, &b| mean_grad[b].total_cmp(&mean_grad[a]).then(a.cmp(&b)));
    for i in candidates {
        if n + added + 1 > config.max_splats {
            break;
        }
        let p = scene.params[i];
        let max_scale = p.log_scale[0].max(p.log_scale[1]).exp();
        if max_scale <= split_bound {
            scene.params.push(p);
            if let Some(d) = scene.deform.as_mut() {
                d.push_copy_of(i);
            }
            added += 1;
            stats.cloned += 1;
        } else {
            let Ok(g) = p.to_gaussian() else { continue };
            for _ in 0..2 {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let mut child = p;
                child.position = g.center + g.tangent_u * (g.scale_u * a) + g.tangent_v * (g.scale_v * b);
                child.log_scale = [
                    p.log_scale[0] - config.split_factor.ln(),
                    p.log_scale[1] - config.split_factor.ln(),
                ];
                scene.params.push(child);
                if let Some(d) = scene.deform.as_mut() {
                    d.push_copy_of(i);
                }
            }
            remove[i] = true;
            added += 2;
            stats.split += 1;
        }
    }
    for (opt, w) in optimizer.iter_mut().zip(widths) {
        opt.push_rows(added, w);
    }
    let mut keep: Vec<bool> = remove.iter().map(|r| !r).collect();
    keep.resize(scene.len(), true);
    for (k, p) in keep.iter_mut().zip(&scene.params) {
        if sigmoid(p.opacity_logit) < config.prune_opacity_threshold {
            if *k {
                stats.pruned += 1;
            }
            *k = false;
        }
    }
    if keep.iter().any(|k| !k) {
        let mut it = keep.iter();
        scene.params.retain(|_| *it.next().unwrap());
        if let Some(d) = scene.deform.as_mut() {
            d.retain(&keep);
        }
        for (opt, w) in optimizer.iter_mut().zip(widths) {
            opt.retain_rows(&keep, w);
        }
    }
    scene.refresh_bounds();
    stats
}

/// Stateful optimizer over one scene.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub scene: Scene,
    pub extent: f64,
    optimizer: Vec<Adam>,
    schedule: AdaptiveWeightState,
    rng: ChaCha8Rng,
    iteration: usize,
    grad_sum: Vec<f64>,
    grad_count: Vec<u32>,
    raster: Rasterizer,
    order: Vec<usize>,
    cursor: usize,
    densify_log: Vec<DensifyStats>,
}

impl Trainer {
    pub fn new(scene: Scene, config: TrainConfig, extent: f64) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        let optimizer = fresh_optimizer(&scene);
        let n = scene.len();
        Ok(Self {
            schedule: AdaptiveWeightState::new(config.schedule, config.iterations)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            optimizer,
            extent,
            scene,
            config,
            iteration: 0,
            grad_sum: vec![0.0; n],
            grad_count: vec![0; n],
            raster: Rasterizer::default(),
            order: Vec::new(),
            cursor: 0,
            densify_log: Vec::new(),
        })
    }

    /// Initializes from the frames' depth with identity deformation banks.
    pub fn from_frames(frames: &[Frame], cams: &[Camera], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut scene = init_pointcloud(frames, cams, config.init_count, config.seed)?;
        if config.basis > 0 {
            scene.deform = Some(DeformField::identity(scene.len(), config.basis));
        }
        let extent = scene_extent(&scene.bounds);
        Self::new(scene, config, extent)
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn densify_log(&self) -> &[DensifyStats] {
        &self.densify_log
    }

    pub fn optimizer(&self) -> &[Adam] {
        &self.optimizer
    }

    /// Replaces the optimizer state, e.g. from a checkpoint.
    pub fn set_optimizer(&mut self, groups: Vec<Adam>) -> Result<()> {
        let basis = self.scene.deform.as_ref().map_or(0, |d| d.basis());
        let widths = group_widths(basis);
        if groups.len() != widths.len() || groups.iter().zip(widths).any(|(g, w)| g.len() != w * self.scene.len()) {
            return Err(Error::ShapeMismatch("optimizer state does not match the scene".into()));
        }
        self.optimizer = groups;
        Ok(())
    }

    fn diagnose(&self, out: &RenderOutput) -> String {
        if let Some((i, p)) = self
            .scene
            .params
            .iter()
            .enumerate()
            .find(|(_, p)| p.to_array().iter().any(|v| !v.is_finite()))
        {
            return format!("gaussian {i} has non-finite parameters {:?}", p.to_array());
        }
        if let Some(((y, x, c), v)) = out.color.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return format!("pixel ({x}, {y}) channel {c} rendered {v}");
        }
        if let Some(((y, x), v)) = out.depth.indexed_iter().find(|(_, v)| v.is_infinite()) {
            return format!("pixel ({x}, {y}) depth {v}");
        }
        "frame data contains non-finite values".into()
    }

    /// One optimization step on `frame` seen from `cam`.
    pub fn step(&mut self, frame: &Frame, cam: &Camera, frame_index: usize) -> Result<StepLog> {
        let it = self.iteration;
        if it >= self.config.iterations {
            return Err(Error::Precondition(format!(
                "iteration {it} reached the configured total {}",
                self.config.iterations
            )));
        }
        let fwd = scene_forward(&self.scene, frame.time)?;
        let out = self.raster.forward(&fwd.deformed, cam);
        let mut lw = total_loss(&out, frame, 1.0, self.config.loss)?;
        let (l_rgb, l_depth) = (lw.terms.rgb, lw.terms.depth);
        if !(l_rgb.is_finite() && l_depth.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                diagnostic: self.diagnose(&out),
            });
        }
        let lambda = self.schedule.lambda_depth(it, l_rgb, l_depth)?;
        let loss = l_rgb + lambda * l_depth;
        lw.grad_depth.mapv_inplace(|g| g * lambda);
        let grads = self.raster.backward(&lw.grad_color, &lw.grad_depth)?;

        let (w2, h2) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
        if let Some(state) = self.raster.state() {
            for s in state.projected() {
                let g = grads.mean2d[s.source_index];
                self.grad_sum[s.source_index] += (g.x * w2).hypot(g.y * h2);
                self.grad_count[s.source_index] += 1;
            }
        }
        let sg = scene_backward(&self.scene, &fwd, &grads);
        self.apply(&sg);

        let count = self.scene.len();
        let cfg = &self.config;
        if it >= cfg.densify_freeze_iters && it % cfg.densify_interval == 0 && it <= cfg.densify_until() {
            let mean: Vec<f64> = self
                .grad_sum
                .iter()
                .zip(&self.grad_count)
                .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                .collect();
            let config = self.config.clone();
            let stats = densify_and_prune(
                &mut self.scene,
                &mut self.optimizer,
                &mean,
                &config,
                self.extent,
                &mut self.rng,
                it,
            );
            self.densify_log.push(stats);
            self.grad_sum = vec![0.0; self.scene.len()];
            self.grad_count = vec![0; self.scene.len()];
        }
        self.iteration += 1;
        Ok(StepLog {
            iter: it,
            loss,
            loss_rgb: l_rgb,
            loss_depth: l_depth,
            lambda,
            count,
            frame: frame_index,
        })
    }

    fn apply(&mut self, sg: &SceneGrad) {
        let lrs = [
            self.config.position_lr(self.iteration) * self.extent,
            self.config.lr_rotation,
            self.config.lr_scale,
            self.config.lr_opacity,
            self.config.lr_color,
        ];
        for (group, lr) in lrs.into_iter().enumerate() {
            let mut flat = gather(&self.scene.params, group);
            let grad = gather(&sg.params, group);
            self.optimizer[group].update(&mut flat, &grad, lr);
            scatter(&mut self.scene.params, group, &flat);
        }
        if let (Some(field), Some(g)) = (self.scene.deform.as_mut(), sg.deform.as_ref()) {
            let lr = self.config.lr_deform;
            self.optimizer[G_DEFORM].update(&mut field.weights, &g.weights, lr);
            self.optimizer[G_DEFORM + 1].update(&mut field.centers, &g.centers, lr);
            self.optimizer[G_DEFORM + 2].update(&mut field.width_params, &g.width_params, lr);
        }
        for p in &mut self.scene.params {
            p.project();
        }
        self.scene.refresh_bounds();
    }

    fn next_frame(&mut self, n: usize) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Runs the remaining iterations, visiting frames in a seeded random
    /// order per epoch.
    pub fn run(&mut self, frames: &[Frame], cams: &[Camera]) -> Result<TrainReport> {
        self.run_with(frames, cams, |_, _| {})
    }

    /// Like [`Trainer::run`], calling `on_step` after every iteration.
    pub fn run_with(
        &mut self,
        frames: &[Frame],
        cams: &[Camera],
        mut on_step: impl FnMut(&Trainer, &StepLog),
    ) -> Result<TrainReport> {
        if frames.is_empty() || frames.len() != cams.len() {
            return Err(Error::Precondition("need one camera per frame and at least one frame".into()));
        }
        let mut report = TrainReport {
            scene_extent: self.extent,
            ..TrainReport::default()
        };
        while self.iteration < self.config.iterations {
            let k = self.next_frame(frames.len());
            let entry = self.step(&frames[k], &cams[k], k)?;
            on_step(self, &entry);
            report.log.push(entry);
        }
        report.densify = self.densify_log.clone();
        Ok(report)
    }
}

/// Convenience: initialize from `frames` and train to completion.
pub fn train(frames: &[Frame], cams: &[Camera], config: TrainConfig) -> Result<(Scene, TrainReport, Vec<Adam>)> {
    let mut trainer = Trainer::from_frames(frames, cams, config)?;
    let report = trainer.run(frames, cams)?;
    let opt = trainer.optimizer.clone();
    Ok((trainer.scene, report, opt))
}
