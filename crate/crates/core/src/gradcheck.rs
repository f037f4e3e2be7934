//! Central finite-difference check of the analytic gradient chain
//! (raw parameters -> deformation -> rasterizer) on random scenes.
//!
//! The numeric side only ever calls the forward renderer. Coordinates whose
//! `+h` or `-h` evaluation crosses a rasterizer cutoff (a contribution
//! appearing or disappearing at the 3-sigma, 1/255 or transmittance limits)
//! are not differentiable there and are counted as skipped instead of
//! compared.

use nalgebra::{Matrix4, Rotation3, Vector2, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::deform::{deform_gaussian, width_to_param, DeformField, CHANNELS, CH_SCALE_U, CH_TANGENT_U};
use crate::error::Result;
use crate::pipeline::{scene_backward, scene_forward, SceneGrad};
use crate::primitive::{logit, Gaussian2D, SplatParams};
use crate::raster::{project_splat, render_window, RenderOutput, Rasterizer};
use crate::scene::Scene;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-3;
pub const ABS_TOLERANCE: f64 = 1e-6;
/// Below this magnitude the absolute tolerance applies.
pub const SMALL_GRADIENT: f64 = 1e-4;
/// A run whose skipped fraction exceeds this is reported as failed.
pub const MAX_SKIPPED_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub splats: usize,
    pub resolution: usize,
    pub basis: usize,
    pub deform: bool,
    pub step: f64,
    /// Deliberately corrupts one analytic gradient group (test fixture).
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            splats: 50,
            resolution: 32,
            basis: crate::deform::DEFAULT_BASIS,
            deform: true,
            step: DEFAULT_STEP,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Position,
    TangentU,
    TangentV,
    Scale,
    Opacity,
    Color,
    DeformWeight,
    DeformCenter,
    DeformWidth,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Position,
        ParamGroup::TangentU,
        ParamGroup::TangentV,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Color,
        ParamGroup::DeformWeight,
        ParamGroup::DeformCenter,
        ParamGroup::DeformWidth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::TangentU => "tangent_u",
            ParamGroup::TangentV => "tangent_v",
            ParamGroup::Scale => "scale",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Color => "color",
            ParamGroup::DeformWeight => "deform_weight",
            ParamGroup::DeformCenter => "deform_center",
            ParamGroup::DeformWidth => "deform_width",
        }
    }

    fn of_param_index(k: usize) -> ParamGroup {
        match k {
            0..=2 => ParamGroup::Position,
            3..=5 => ParamGroup::TangentU,
            6..=8 => ParamGroup::TangentV,
            9..=10 => ParamGroup::Scale,
            11 => ParamGroup::Opacity,
            _ => ParamGroup::Color,
        }
    }
}

/// One compared coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub splat: usize,
    /// Index within the group for that splat.
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Sample {
    fn magnitude(&self) -> f64 {
        self.analytic.abs().max(self.numeric.abs())
    }

    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_error(&self) -> f64 {
        let m = self.magnitude();
        if m == 0.0 {
            0.0
        } else {
            self.abs_error() / m
        }
    }

    pub fn passes(&self) -> bool {
        if self.magnitude() < SMALL_GRADIENT {
            self.abs_error() < ABS_TOLERANCE
        } else {
            self.rel_error() < REL_TOLERANCE
        }
    }

    /// Error normalized by the applicable tolerance (< 1 passes).
    fn score(&self) -> f64 {
        if self.magnitude() < SMALL_GRADIENT {
            self.abs_error() / ABS_TOLERANCE
        } else {
            self.rel_error() / REL_TOLERANCE
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub skipped: usize,
    pub failures: usize,
    /// Largest relative error among coordinates above [`SMALL_GRADIENT`].
    pub max_rel_error: f64,
    /// Largest absolute error among coordinates below [`SMALL_GRADIENT`].
    pub max_small_abs_error: f64,
    pub worst: Option<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.groups.iter().map(|g| g.skipped).sum()
    }

    pub fn skipped_fraction(&self) -> f64 {
        let total = self.checked() + self.skipped();
        if total == 0 {
            0.0
        } else {
            self.skipped() as f64 / total as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.failures == 0) && self.skipped_fraction() <= MAX_SKIPPED_FRACTION
    }

    /// The worst offending coordinate over all groups.
    pub fn worst(&self) -> Option<(ParamGroup, Sample)> {
        self.groups
            .iter()
            .filter_map(|g| g.worst.map(|s| (g.group, s)))
            .max_by(|a, b| a.1.score().total_cmp(&b.1.score()))
    }
}

/// A random scene, view and linear loss for gradient checking.
#[derive(Debug, Clone)]
pub struct CheckProblem {
    pub scene: Scene,
    pub camera: Camera,
    pub time: f64,
    pub grad_color: Array3<f64>,
    pub grad_depth: Array2<f64>,
}

impl CheckProblem {
    pub fn random(config: &GradcheckConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let res = config.resolution;
        let f = res as f64 * 1.25;
        let c = (res as f64 - 1.0) / 2.0;
        let camera = Camera::new((f, f), (c, c), Matrix4::identity(), (res, res), 0.5, 50.0)
            .expect("valid check camera");

        let mut params = Vec::with_capacity(config.splats);
        for _ in 0..config.splats {
            let z: f64 = rng.random_range(3.0..6.0);
            let px: f64 = rng.random_range(0.0..res as f64);
            let py: f64 = rng.random_range(0.0..res as f64);
            let center = camera.unproject(px, py, z);
            // Plane normal within ~60 degrees of the view axis.
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
            let tilt = rng.random_range(0.0..1.0);
            let spin = rng.random_range(0.0..std::f64::consts::TAU);
            let rot = Rotation3::new(axis.normalize() * tilt) * Rotation3::new(Vector3::z() * spin);
            let footprint = z / f;
            let g = Gaussian2D {
                center,
                tangent_u: rot * Vector3::x(),
                tangent_v: rot * Vector3::y(),
                scale_u: footprint * rng.random_range(0.8..4.0),
                scale_v: footprint * rng.random_range(0.8..4.0),
                opacity: rng.random_range(0.2..0.9),
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
            };
            let mut p = SplatParams::from_gaussian(&g);
            p.opacity_logit = logit(g.opacity);
            // Raw frame vectors away from the orthonormal fixed point.
            p.frame_u *= rng.random_range(0.7..1.4);
            p.frame_v += p.frame_u * rng.random_range(-0.3..0.3);
            params.push(p);
        }

        let deform = config.deform.then(|| {
            let mut field = DeformField::identity(config.splats, config.basis);
            let nb = config.basis;
            for i in 0..config.splats {
                let s = params[i].log_scale[0].exp().min(params[i].log_scale[1].exp());
                for ch in 0..CHANNELS {
                    let amp = match ch {
                        c if c < CH_TANGENT_U => 0.05,
                        c if c < CH_SCALE_U => 0.05,
                        _ => 0.2 * s,
                    };
                    for j in 0..nb {
                        let k = (i * CHANNELS + ch) * nb + j;
                        field.weights[k] = rng.random_range(-amp..amp);
                        field.centers[k] = rng.random_range(0.0..1.0);
                        field.width_params[k] = width_to_param(rng.random_range(0.05..0.3));
                    }
                }
            }
            field
        });

        let scene = Scene::new(params, deform).expect("consistent scene");
        let time = rng.random_range(0.0..1.0);
        let grad_color = Array3::from_shape_fn((res, res, 3), |_| rng.sample::<f64, _>(StandardNormal));
        let grad_depth = Array2::from_shape_fn((res, res), |_| 0.2 * rng.sample::<f64, _>(StandardNormal));
        Self {
            scene,
            camera,
            time,
            grad_color,
            grad_depth,
        }
    }

    /// The loss restricted to a window whose top-left pixel is `(x0, y0)`.
    pub fn window_loss(&self, out: &RenderOutput, x0: usize, y0: usize) -> f64 {
        let (h, w) = out.alpha.dim();
        let mut l = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    l += out.color[[y, x, c]] * self.grad_color[[y + y0, x + x0, c]];
                }
                let d = out.depth[[y, x]];
                if d.is_finite() {
                    l += d * self.grad_depth[[y + y0, x + x0]];
                }
            }
        }
        l
    }

    /// The scalar loss being differentiated.
    pub fn loss(&self, out: &RenderOutput) -> f64 {
        let mut l = 0.0;
        for (a, b) in out.color.iter().zip(self.grad_color.iter()) {
            l += a * b;
        }
        for (d, g) in out.depth.iter().zip(self.grad_depth.iter()) {
            if d.is_finite() {
                l += d * g;
            }
        }
        l
    }

    pub fn analytic(&self) -> Result<SceneGrad> {
        let fwd = scene_forward(&self.scene, self.time)?;
        let mut raster = Rasterizer::default();
        raster.forward(&fwd.deformed, &self.camera);
        let grads = raster.backward(&self.grad_color, &self.grad_depth)?;
        Ok(scene_backward(&self.scene, &fwd, &grads))
    }
}

enum Coord {
    Param(usize),
    Weight(usize),
    Center(usize),
    Width(usize),
}

pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let problem = CheckProblem::random(config);
    let mut analytic = problem.analytic()?;
    if config.inject_fault {
        for p in analytic.params.iter_mut() {
            p.log_scale[0] *= 1.01;
            p.log_scale[0] += 1e-3;
        }
    }

    let fwd = scene_forward(&problem.scene, problem.time)?;

    let h = config.step;
    let per_splat: Vec<Vec<(ParamGroup, Option<Sample>)>> = (0..problem.scene.len())
        .into_par_iter()
        .map(|i| {
            let mut coords: Vec<(ParamGroup, usize, Coord)> = (0..SplatParams::LEN)
                .map(|k| {
                    let group = ParamGroup::of_param_index(k);
                    let first = (0..SplatParams::LEN)
                        .find(|&j| ParamGroup::of_param_index(j) == group)
                        .unwrap();
                    (group, k - first, Coord::Param(k))
                })
                .collect();
            if let Some(field) = &problem.scene.deform {
                let n = CHANNELS * field.basis();
                for local in 0..n {
                    let k = i * n + local;
                    coords.push((ParamGroup::DeformWeight, local, Coord::Weight(k)));
                    coords.push((ParamGroup::DeformCenter, local, Coord::Center(k)));
                    coords.push((ParamGroup::DeformWidth, local, Coord::Width(k)));
                }
            }

            let (xs, ys) = match project_splat(&fwd.deformed[i], &problem.camera, i) {
                Some(p) => {
                    let margin = p.half_extent + Vector2::repeat(2.0);
                    let lo = |c: f64, m: f64| (c - m).floor().max(0.0) as usize;
                    let hi = |c: f64, m: f64, n: usize| ((c + m).ceil().max(0.0) as usize + 1).min(n);
                    (
                        lo(p.pixel_center.x, margin.x)..hi(p.pixel_center.x, margin.x, problem.camera.width),
                        lo(p.pixel_center.y, margin.y)..hi(p.pixel_center.y, margin.y, problem.camera.height),
                    )
                }
                None => (0..problem.camera.width, 0..problem.camera.height),
            };
            let mut deformed = fwd.deformed.clone();
            let base_digest = render_window(&deformed, &problem.camera, xs.clone(), ys.clone()).1;
            let mut eval = |scene: &Scene| -> Option<(f64, u64)> {
                let g = scene.params[i].to_gaussian().ok()?;
                deformed[i] = match &scene.deform {
                    Some(field) => deform_gaussian(&g, field, i, problem.time).ok()?,
                    None => g,
                };
                let (out, digest) = render_window(&deformed, &problem.camera, xs.clone(), ys.clone());
                Some((problem.window_loss(&out, xs.start, ys.start), digest))
            };

            let mut scene = problem.scene.clone();
            let mut results = Vec::with_capacity(coords.len());
            for (group, local, coord) in coords {
                let (value, analytic_value) = match coord {
                    Coord::Param(k) => (problem.scene.params[i].to_array()[k], analytic.params[i].to_array()[k]),
                    Coord::Weight(k) => (scene.deform.as_ref().unwrap().weights[k], analytic.deform.as_ref().unwrap().weights[k]),
                    Coord::Center(k) => (scene.deform.as_ref().unwrap().centers[k], analytic.deform.as_ref().unwrap().centers[k]),
                    Coord::Width(k) => (scene.deform.as_ref().unwrap().width_params[k], analytic.deform.as_ref().unwrap().width_params[k]),
                };
                let set = |scene: &mut Scene, v: f64| match coord {
                    Coord::Param(k) => {
                        let mut a = scene.params[i].to_array();
                        a[k] = v;
                        scene.params[i] = SplatParams::from_array(&a);
                    }
                    Coord::Weight(k) => scene.deform.as_mut().unwrap().weights[k] = v,
                    Coord::Center(k) => scene.deform.as_mut().unwrap().centers[k] = v,
                    Coord::Width(k) => scene.deform.as_mut().unwrap().width_params[k] = v,
                };
                set(&mut scene, value + h);
                let plus = eval(&scene);
                set(&mut scene, value - h);
                let minus = eval(&scene);
                set(&mut scene, value);
                let sample = match (plus, minus) {
                    (Some((lp, dp)), Some((lm, dm))) if dp == base_digest && dm == base_digest => Some(Sample {
                        splat: i,
                        coordinate: local,
                        analytic: analytic_value,
                        numeric: (lp - lm) / (2.0 * h),
                    }),
                    _ => None,
                };
                results.push((group, sample));
            }
            results
        })
        .collect();

    let mut groups: Vec<GroupReport> = ParamGroup::ALL
        .iter()
        .filter(|g| config.deform || !matches!(g, ParamGroup::DeformWeight | ParamGroup::DeformCenter | ParamGroup::DeformWidth))
        .map(|&group| GroupReport {
            group,
            checked: 0,
            skipped: 0,
            failures: 0,
            max_rel_error: 0.0,
            max_small_abs_error: 0.0,
            worst: None,
        })
        .collect();
    for (group, sample) in per_splat.into_iter().flatten() {
        let report = groups.iter_mut().find(|g| g.group == group).unwrap();
        let Some(s) = sample else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        if !s.passes() {
            report.failures += 1;
        }
        if s.magnitude() < SMALL_GRADIENT {
            report.max_small_abs_error = report.max_small_abs_error.max(s.abs_error());
        } else {
            report.max_rel_error = report.max_rel_error.max(s.rel_error());
        }
        if report.worst.is_none_or(|w| s.score() > w.score()) {
            report.worst = Some(s);
        }
    }
    Ok(GradcheckReport {
        config: config.clone(),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_passes() {
        let report = run(&GradcheckConfig::default()).unwrap();
        for g in &report.groups {
            assert_eq!(g.failures, 0, "{:?}: worst {:?}", g.group, g.worst);
            assert!(g.checked > 0, "{:?} unchecked", g.group);
        }
        assert!(report.passed(), "skipped {}", report.skipped_fraction());
    }

    #[test]
    fn single_splat_passes() {
        let report = run(&GradcheckConfig {
            seed: 4,
            splats: 1,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn injected_fault_is_detected() {
        let report = run(&GradcheckConfig {
            seed: 1,
            splats: 5,
            inject_fault: true,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().0, ParamGroup::Scale);
    }
}
