//! Analytic deforming height-field scenes with exact ground truth.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector2, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::frame::Frame;

/// Marching step along the ray, in world units.
pub const MARCH_STEP: f64 = 0.05;
/// Bisection stops once the bracket is shorter than this.
pub const ROOT_TOLERANCE: f64 = 1e-8;

/// `A exp(-|xy - c|^2 / 2 s^2) sin(2 pi f t + phi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub amplitude: f64,
    pub sigma: f64,
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub z0: f64,
    #[serde(default)]
    pub bumps: Vec<Bump>,
}

impl Surface {
    pub fn height(&self, x: f64, y: f64, t: f64) -> f64 {
        let mut z = self.z0;
        for b in &self.bumps {
            let dx = x - b.center[0];
            let dy = y - b.center[1];
            let env = (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
            z += b.amplitude * env * (2.0 * PI * b.frequency * t + b.phase).sin();
        }
        z
    }

    fn max_amplitude(&self) -> f64 {
        self.bumps.iter().map(|b| b.amplitude.abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    /// Alternating squares of side `size` in world units.
    Checker { size: f64, a: [f64; 3], b: [f64; 3] },
    /// Smooth value noise blended between two colors.
    Noise {
        scale: f64,
        octaves: u32,
        a: [f64; 3],
        b: [f64; 3],
    },
}

impl Default for Texture {
    fn default() -> Self {
        Texture::Noise {
            scale: 6.0,
            octaves: 3,
            a: [0.55, 0.18, 0.16],
            b: [0.95, 0.62, 0.55],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraPath {
    Fixed {
        eye: [f64; 3],
        target: [f64; 3],
    },
    /// The eye circles `radius` around `eye` once over `t` in `[0,1]`,
    /// always looking at `target`.
    Orbit {
        eye: [f64; 3],
        target: [f64; 3],
        radius: f64,
    },
}

impl Default for CameraPath {
    fn default() -> Self {
        CameraPath::Fixed {
            eye: [0.0, 0.0, 0.0],
            target: [0.0, 0.0, 1.0],
        }
    }
}

/// A screen-space capsule moving at constant velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    /// Segment endpoints in pixels at `t = 0`.
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub radius: f64,
    /// Displacement in pixels over `t` from 0 to 1.
    pub velocity: [f64; 2],
}

impl Capsule {
    pub fn covers(&self, px: f64, py: f64, t: f64) -> bool {
        let off = Vector2::new(self.velocity[0], self.velocity[1]) * t;
        let a = Vector2::new(self.start[0], self.start[1]) + off;
        let b = Vector2::new(self.end[0], self.end[1]) + off;
        let p = Vector2::new(px, py);
        let ab = b - a;
        let len2 = ab.norm_squared();
        let s = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (p - (a + ab * s)).norm() <= self.radius
    }
}

fn default_fov() -> f64 {
    60.0
}

fn default_near() -> f64 {
    1.0
}

fn default_far() -> f64 {
    1000.0
}

fn default_background() -> [f64; 3] {
    [0.0, 0.0, 0.0]
}

/// Everything needed to generate a synthetic dataset. Units are millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    #[serde(default)]
    pub seed: u64,
    /// Horizontal field of view in degrees.
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub surface: Surface,
    #[serde(default)]
    pub texture: Texture,
    #[serde(default)]
    pub camera: CameraPath,
    #[serde(default)]
    pub instruments: Vec<Capsule>,
    /// Paint instruments into the observed RGB and blank their depth.
    #[serde(default)]
    pub paint_instruments: bool,
    #[serde(default = "default_background")]
    pub background: [f64; 3],
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 10,
            seed: 0,
            fov_deg: default_fov(),
            near: default_near(),
            far: default_far(),
            surface: Surface {
                z0: 50.0,
                bumps: Vec::new(),
            },
            texture: Texture::default(),
            camera: CameraPath::default(),
            instruments: Vec::new(),
            paint_instruments: false,
            background: default_background(),
        }
    }
}

impl SyntheticSceneSpec {
    /// 128x128, 20 frames, one breathing bump seen by a fixed camera tilted
    /// 25 degrees off the surface normal.
    pub fn reconstruction_benchmark() -> Self {
        let tilt = 25f64.to_radians();
        let dist = 50.0;
        Self {
            width: 128,
            height: 128,
            frames: 20,
            seed: 7,
            fov_deg: 50.0,
            surface: Surface {
                z0: 50.0,
                bumps: vec![Bump {
                    center: [0.0, 0.0],
                    amplitude: 6.0,
                    sigma: 8.0,
                    frequency: 1.0,
                    phase: 0.0,
                }],
            },
            camera: CameraPath::Fixed {
                eye: [0.0, -dist * tilt.sin(), 50.0 - dist * tilt.cos()],
                target: [0.0, 0.0, 50.0],
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return bad("resolution and frame count must be positive".into());
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 170.0) {
            return bad(format!("field of view {} out of range", self.fov_deg));
        }
        if !(self.surface.z0 > 0.0) {
            return bad("surface offset z0 must be positive".into());
        }
        if self.surface.max_amplitude() >= self.surface.z0 / 4.0 {
            return bad(format!(
                "total bump amplitude {} must stay below z0/4 = {}",
                self.surface.max_amplitude(),
                self.surface.z0 / 4.0
            ));
        }
        if self.surface.bumps.iter().any(|b| !(b.sigma > 0.0)) {
            return bad("bump widths must be positive".into());
        }
        match &self.texture {
            Texture::Checker { size, .. } if !(*size > 0.0) => return bad("checker size must be positive".into()),
            Texture::Noise { scale, octaves, .. } if !(*scale > 0.0) || *octaves == 0 => {
                return bad("noise scale and octaves must be positive".into())
            }
            _ => {}
        }
        if self.instruments.iter().any(|c| !(c.radius > 0.0)) {
            return bad("instrument radius must be positive".into());
        }
        Ok(())
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        if self.frames <= 1 {
            0.0
        } else {
            frame as f64 / (self.frames - 1) as f64
        }
    }

    pub fn camera_at(&self, t: f64) -> Result<Camera> {
        let (eye, target) = match &self.camera {
            CameraPath::Fixed { eye, target } => (Vector3::from(*eye), Vector3::from(*target)),
            CameraPath::Orbit { eye, target, radius } => {
                let a = 2.0 * PI * t;
                (
                    Vector3::from(*eye) + Vector3::new(a.cos() - 1.0, a.sin(), 0.0) * *radius,
                    Vector3::from(*target),
                )
            }
        };
        let forward = (target - eye).normalize();
        let up = if forward.y.abs() > 0.99 { Vector3::z() } else { -Vector3::y() };
        let w2c: Matrix4<f64> = Camera::look_at(eye, target, up);
        let f = self.width as f64 / 2.0 / (self.fov_deg.to_radians() / 2.0).tan();
        Camera::new(
            (f, f),
            (self.width as f64 / 2.0, self.height as f64 / 2.0),
            w2c,
            (self.width, self.height),
            self.near,
            self.far,
        )
    }
}

/// Smooth value noise on a hashed lattice, in `[0,1]`.
#[derive(Debug, Clone)]
struct ValueNoise {
    table: Vec<f64>,
}

impl ValueNoise {
    const SIZE: usize = 256;

    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            table: (0..Self::SIZE * Self::SIZE).map(|_| rng.random()).collect(),
        }
    }

    fn lattice(&self, i: i64, j: i64) -> f64 {
        let n = Self::SIZE as i64;
        self.table[(i.rem_euclid(n) * n + j.rem_euclid(n)) as usize]
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x.floor(), y.floor());
        let (tx, ty) = (x - fx, y - fy);
        let s = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
        let (sx, sy) = (s(tx), s(ty));
        let (i, j) = (fx as i64, fy as i64);
        let top = self.lattice(i, j) * (1.0 - sx) + self.lattice(i + 1, j) * sx;
        let bot = self.lattice(i, j + 1) * (1.0 - sx) + self.lattice(i + 1, j + 1) * sx;
        top * (1.0 - sy) + bot * sy
    }

    fn fractal(&self, x: f64, y: f64, octaves: u32) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut freq = 1.0;
        for _ in 0..octaves {
            total += amp * self.sample(x * freq, y * freq);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        total / norm
    }
}

fn texture_color(tex: &Texture, noise: &ValueNoise, x: f64, y: f64) -> Vector3<f64> {
    let mix = |a: &[f64; 3], b: &[f64; 3], s: f64| Vector3::from(*a) * (1.0 - s) + Vector3::from(*b) * s;
    match tex {
        Texture::Checker { size, a, b } => {
            let parity = ((x / size).floor() as i64 + (y / size).floor() as i64).rem_euclid(2);
            mix(a, b, parity as f64)
        }
        Texture::Noise { scale, octaves, a, b } => mix(a, b, noise.fractal(x / scale, y / scale, *octaves)),
    }
}

/// First intersection of `origin + s dir` with the surface at time `t`.
pub fn intersect(surface: &Surface, origin: &Vector3<f64>, dir: &Vector3<f64>, t: f64) -> Option<f64> {
    let dir_n = dir.normalize();
    let f = |s: f64| {
        let p = origin + dir_n * s;
        p.z - surface.height(p.x, p.y, t)
    };
    let amp = surface.max_amplitude();
    let (lo_z, hi_z) = (surface.z0 - amp - 1e-6, surface.z0 + amp + 1e-6);
    let s_range = if dir_n.z.abs() < 1e-12 {
        if origin.z < lo_z || origin.z > hi_z {
            return None;
        }
        (0.0, 1e4)
    } else {
        let a = (lo_z - origin.z) / dir_n.z;
        let b = (hi_z - origin.z) / dir_n.z;
        (a.min(b).max(0.0), a.max(b))
    };
    if s_range.1 <= s_range.0 {
        return None;
    }
    let mut s0 = s_range.0;
    let mut f0 = f(s0);
    if f0 == 0.0 {
        return Some(s0);
    }
    if f0 > 0.0 {
        // Origin already beyond the surface.
        return None;
    }
    while s0 < s_range.1 {
        let s1 = (s0 + MARCH_STEP).min(s_range.1);
        let f1 = f(s1);
        if f1 >= 0.0 {
            let (mut a, mut b) = (s0, s1);
            while b - a > ROOT_TOLERANCE {
                let m = 0.5 * (a + b);
                if f(m) >= 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            return Some(0.5 * (a + b));
        }
        s0 = s1;
        f0 = f1;
    }
    let _ = f0;
    None
}

/// A generated dataset. `frames` are the observations (instruments painted
/// in when requested); `clean_rgb` and `gt_depth` are the unoccluded truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub frames: Vec<Frame>,
    pub cameras: Vec<Camera>,
    pub clean_rgb: Vec<Array3<f64>>,
    pub gt_depth: Vec<Array2<f64>>,
}

/// Gray used for painted instruments.
pub const INSTRUMENT_COLOR: [f64; 3] = [0.6, 0.62, 0.65];

pub fn synth_generate(spec: &SyntheticSceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let noise = ValueNoise::new(spec.seed);
    let per_frame: Vec<Result<(Frame, Camera, Array3<f64>, Array2<f64>)>> = (0..spec.frames)
        .into_par_iter()
        .map(|i| {
            let t = spec.time_of(i);
            let cam = spec.camera_at(t)?;
            let (h, w) = (spec.height, spec.width);
            let mut rgb = Array3::zeros((h, w, 3));
            let mut depth = Array2::from_elem((h, w), f64::NAN);
            let mut mask = Array2::from_elem((h, w), false);
            let origin = cam.center();
            for y in 0..h {
                for x in 0..w {
                    let dir = cam.ray_direction(x as f64, y as f64);
                    let color = match intersect(&spec.surface, &origin, &dir, t) {
                        Some(s) => {
                            let p = origin + dir.normalize() * s;
                            depth[[y, x]] = cam.to_camera(&p).z;
                            texture_color(&spec.texture, &noise, p.x, p.y)
                        }
                        None => Vector3::from(spec.background),
                    };
                    for c in 0..3 {
                        rgb[[y, x, c]] = color[c].clamp(0.0, 1.0);
                    }
                    mask[[y, x]] = spec.instruments.iter().any(|k| k.covers(x as f64, y as f64, t));
                }
            }
            let clean = rgb.clone();
            let gt = depth.clone();
            if spec.paint_instruments {
                for ((y, x), &m) in mask.indexed_iter() {
                    if m {
                        for c in 0..3 {
                            rgb[[y, x, c]] = INSTRUMENT_COLOR[c];
                        }
                        depth[[y, x]] = f64::NAN;
                    }
                }
            }
            Ok((Frame::new(rgb, depth, mask, t)?, cam, clean, gt))
        })
        .collect();
    let mut out = SyntheticScene {
        frames: Vec::with_capacity(spec.frames),
        cameras: Vec::with_capacity(spec.frames),
        clean_rgb: Vec::with_capacity(spec.frames),
        gt_depth: Vec::with_capacity(spec.frames),
    };
    for r in per_frame {
        let (f, c, rgb, d) = r?;
        out.frames.push(f);
        out.cameras.push(c);
        out.clean_rgb.push(rgb);
        out.gt_depth.push(d);
    }
    Ok(out)
}
