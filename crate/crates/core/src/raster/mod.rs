//! Tile-based forward rasterizer with front-to-back alpha blending and its
//! analytic backward pass.
//!
//! Every contribution is evaluated at integer pixel coordinates. A splat
//! contributes to a pixel when it lies within the 3-sigma ellipse and its
//! effective alpha is at least 1/255; blending stops once transmittance falls
//! below 1e-4. Forward and backward share [`blend_pixel`], so the cutoffs are
//! identical in both passes.

mod project;
mod tile;

pub use project::{
    project_splat, project_splat_backward, ProjectedSplat, ScreenGrad, DILATION, SIGMA_CUTOFF,
};
pub use tile::{tile_bin, TileBins, DEFAULT_TILE_SIZE};

use nalgebra::Vector2;
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::primitive::{Gaussian2D, GaussianGrad, Vec3};
use project::CUTOFF_SQ;

pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Pixels whose accumulated opacity is below this have no depth.
pub const MIN_DEPTH_ALPHA: f64 = 1e-4;

/// Rendered color, expected depth (NaN where coverage is too thin) and
/// accumulated opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Array3<f64>,
    pub depth: Array2<f64>,
    pub alpha: Array2<f64>,
}

impl RenderOutput {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            color: Array3::zeros((height, width, 3)),
            depth: Array2::from_elem((height, width), f64::NAN),
            alpha: Array2::zeros((height, width)),
        }
    }

    /// Bitwise equality, treating NaN depths as equal.
    pub fn bitwise_eq(&self, other: &RenderOutput) -> bool {
        let eq = |a: &f64, b: &f64| a.to_bits() == b.to_bits();
        self.color.dim() == other.color.dim()
            && self.color.iter().zip(other.color.iter()).all(|(a, b)| eq(a, b))
            && self.depth.iter().zip(other.depth.iter()).all(|(a, b)| eq(a, b))
            && self.alpha.iter().zip(other.alpha.iter()).all(|(a, b)| eq(a, b))
    }

    /// Largest absolute difference over color, alpha and (finite) depth.
    /// Depth validity mismatches count as infinite.
    pub fn max_abs_diff(&self, other: &RenderOutput) -> f64 {
        let mut m = 0.0f64;
        for (a, b) in self.color.iter().zip(other.color.iter()) {
            m = m.max((a - b).abs());
        }
        for (a, b) in self.alpha.iter().zip(other.alpha.iter()) {
            m = m.max((a - b).abs());
        }
        for (a, b) in self.depth.iter().zip(other.depth.iter()) {
            match (a.is_nan(), b.is_nan()) {
                (true, true) => {}
                (false, false) => m = m.max((a - b).abs()),
                _ => return f64::INFINITY,
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy)]
struct PixelValue {
    color: Vec3,
    depth_sum: f64,
    transmittance: f64,
}

impl PixelValue {
    fn alpha(&self) -> f64 {
        1.0 - self.transmittance
    }

    fn depth(&self) -> f64 {
        let a = self.alpha();
        if a >= MIN_DEPTH_ALPHA {
            self.depth_sum / a
        } else {
            f64::NAN
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Contribution {
    /// Position in the candidate list.
    slot: usize,
    gauss: f64,
    alpha: f64,
    transmittance: f64,
}

/// Blends candidates front to back at pixel `(px, py)`. `on_contribution`
/// sees every accepted contribution in order.
#[inline]
fn blend_pixel(
    px: f64,
    py: f64,
    splats: &[ProjectedSplat],
    candidates: &[u32],
    mut on_contribution: impl FnMut(Contribution),
) -> PixelValue {
    let mut t = 1.0;
    let mut color = Vec3::zeros();
    let mut depth_sum = 0.0;
    for (slot, &k) in candidates.iter().enumerate() {
        let s = &splats[k as usize];
        let q = s.mahalanobis_sq(px, py);
        if q > CUTOFF_SQ {
            continue;
        }
        let gauss = (-0.5 * q).exp();
        let alpha = gauss * s.opacity;
        if alpha < MIN_ALPHA {
            continue;
        }
        let w = alpha * t;
        color += s.color * w;
        depth_sum += w * s.camera_z;
        on_contribution(Contribution {
            slot,
            gauss,
            alpha,
            transmittance: t,
        });
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    PixelValue {
        color,
        depth_sum,
        transmittance: t,
    }
}

fn fnv_mix(h: u64, v: u64) -> u64 {
    let mut h = h;
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;

/// Projects and depth-sorts (ties by source index) all visible splats.
fn project_all(gaussians: &[Gaussian2D], cam: &Camera) -> Vec<ProjectedSplat> {
    let mut splats: Vec<ProjectedSplat> = gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_splat(g, cam, i))
        .collect();
    splats.sort_by(|a, b| {
        a.camera_z
            .total_cmp(&b.camera_z)
            .then(a.source_index.cmp(&b.source_index))
    });
    splats
}

/// Everything the backward pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct ForwardState {
    camera: Camera,
    gaussians: Vec<Gaussian2D>,
    splats: Vec<ProjectedSplat>,
    bins: TileBins,
    digest: u64,
}

impl ForwardState {
    pub fn projected(&self) -> &[ProjectedSplat] {
        &self.splats
    }

    pub fn bins(&self) -> &TileBins {
        &self.bins
    }

    /// Hash of the exact set and order of (pixel, splat) contributions,
    /// culling included. Two renders with equal digests took the same
    /// branch at every cutoff.
    pub fn active_set_digest(&self) -> u64 {
        self.digest
    }
}

/// Per-splat gradients from [`Rasterizer::backward`], indexed by source.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub gaussians: Vec<GaussianGrad>,
    /// Gradient with respect to the projected center, in pixels.
    pub mean2d: Vec<Vector2<f64>>,
}

/// Stateful rasterizer: `forward` saves what `backward` needs.
#[derive(Debug, Clone)]
pub struct Rasterizer {
    tile_size: usize,
    saved: Option<ForwardState>,
}

impl Default for Rasterizer {
    fn default() -> Self {
        Self::new(DEFAULT_TILE_SIZE)
    }
}

impl Rasterizer {
    pub fn new(tile_size: usize) -> Self {
        assert!(tile_size >= 4, "tile size must be at least 4");
        Self {
            tile_size,
            saved: None,
        }
    }

    pub fn state(&self) -> Option<&ForwardState> {
        self.saved.as_ref()
    }

    pub fn forward(&mut self, gaussians: &[Gaussian2D], cam: &Camera) -> RenderOutput {
        let splats = project_all(gaussians, cam);
        let bins = tile_bin(&splats, cam.width, cam.height, self.tile_size);
        let (w, h) = (cam.width, cam.height);

        let tiles: Vec<(Vec<PixelValue>, u64)> = (0..bins.tile_count())
            .into_par_iter()
            .map(|tile| {
                let (xr, yr) = bins.pixel_range(tile, w, h);
                let list = &bins.lists[tile];
                let mut digest = FNV_OFFSET;
                let mut out = Vec::with_capacity(xr.len() * yr.len());
                for y in yr.clone() {
                    for x in xr.clone() {
                        let v = blend_pixel(x as f64, y as f64, &splats, list, |c| {
                            digest = fnv_mix(digest, splats[list[c.slot] as usize].source_index as u64);
                        });
                        digest = fnv_mix(digest, u64::MAX - (v.alpha() >= MIN_DEPTH_ALPHA) as u64);
                        out.push(v);
                    }
                }
                (out, digest)
            })
            .collect();

        let mut output = RenderOutput::empty(w, h);
        let mut digest = fnv_mix(FNV_OFFSET, splats.len() as u64);
        for s in &splats {
            digest = fnv_mix(digest, s.source_index as u64);
        }
        for (tile, (values, d)) in tiles.into_iter().enumerate() {
            digest = fnv_mix(digest, d);
            let (xr, yr) = bins.pixel_range(tile, w, h);
            let mut it = values.into_iter();
            for y in yr {
                for x in xr.clone() {
                    let v = it.next().expect("tile pixel count");
                    write_pixel(&mut output, x, y, &v);
                }
            }
        }

        self.saved = Some(ForwardState {
            camera: cam.clone(),
            gaussians: gaussians.to_vec(),
            splats,
            bins,
            digest,
        });
        output
    }

    /// Gradients of `sum(grad_color * color) + sum(grad_depth * depth)` for
    /// the last forward render. Depth gradients are ignored where the
    /// rendered depth is NaN.
    pub fn backward(&self, grad_color: &Array3<f64>, grad_depth: &Array2<f64>) -> Result<RenderGrads> {
        let state = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::Precondition("backward called before forward".into()))?;
        let cam = &state.camera;
        let (w, h) = (cam.width, cam.height);
        if grad_color.dim() != (h, w, 3) || grad_depth.dim() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "gradient images {:?}/{:?} for a {w}x{h} render",
                grad_color.dim(),
                grad_depth.dim()
            )));
        }
        let splats = &state.splats;
        let bins = &state.bins;

        let partials: Vec<Vec<ScreenGrad>> = (0..bins.tile_count())
            .into_par_iter()
            .map(|tile| {
                let list = &bins.lists[tile];
                let mut acc = vec![ScreenGrad::default(); list.len()];
                let mut contribs = Vec::new();
                let (xr, yr) = bins.pixel_range(tile, w, h);
                for y in yr {
                    for x in xr.clone() {
                        let gc = Vec3::new(grad_color[[y, x, 0]], grad_color[[y, x, 1]], grad_color[[y, x, 2]]);
                        let gd = grad_depth[[y, x]];
                        contribs.clear();
                        let v = blend_pixel(x as f64, y as f64, splats, list, |c| contribs.push(c));
                        backward_pixel(x as f64, y as f64, splats, list, &contribs, &v, &gc, gd, &mut acc);
                    }
                }
                acc
            })
            .collect();

        let mut screen = vec![ScreenGrad::default(); splats.len()];
        for (tile, acc) in partials.iter().enumerate() {
            for (slot, g) in acc.iter().enumerate() {
                screen[bins.lists[tile][slot] as usize].add(g);
            }
        }

        let per_splat: Vec<(usize, GaussianGrad, Vector2<f64>)> = splats
            .par_iter()
            .zip(screen.par_iter())
            .map(|(s, sg)| {
                let g = &state.gaussians[s.source_index];
                (s.source_index, project_splat_backward(g, cam, sg), sg.mean)
            })
            .collect();

        let n = state.gaussians.len();
        let mut grads = RenderGrads {
            gaussians: vec![GaussianGrad::default(); n],
            mean2d: vec![Vector2::zeros(); n],
        };
        for (i, g, m) in per_splat {
            grads.gaussians[i] = g;
            grads.mean2d[i] = m;
        }
        Ok(grads)
    }
}

fn write_pixel(out: &mut RenderOutput, x: usize, y: usize, v: &PixelValue) {
    for c in 0..3 {
        out.color[[y, x, c]] = v.color[c];
    }
    out.alpha[[y, x]] = v.alpha();
    out.depth[[y, x]] = v.depth();
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn backward_pixel(
    px: f64,
    py: f64,
    splats: &[ProjectedSplat],
    list: &[u32],
    contribs: &[Contribution],
    value: &PixelValue,
    grad_color: &Vec3,
    grad_depth: f64,
    acc: &mut [ScreenGrad],
) {
    let a_total = value.alpha();
    let (g_dsum, g_alpha) = if a_total >= MIN_DEPTH_ALPHA && grad_depth != 0.0 {
        (grad_depth / a_total, -grad_depth * value.depth_sum / (a_total * a_total))
    } else {
        (0.0, 0.0)
    };
    if *grad_color == Vec3::zeros() && g_dsum == 0.0 {
        return;
    }
    let mut suffix = 0.0;
    for c in contribs.iter().rev() {
        let s = &splats[list[c.slot] as usize];
        let feature = grad_color.dot(&s.color) + g_dsum * s.camera_z + g_alpha;
        let weight = c.alpha * c.transmittance;
        let d_alpha = c.transmittance * feature - suffix / (1.0 - c.alpha);
        suffix += weight * feature;

        let g = &mut acc[c.slot];
        g.color += grad_color * weight;
        g.camera_z += g_dsum * weight;
        g.opacity += d_alpha * c.gauss;
        // alpha = opacity * exp(-q/2)
        let d_q = -0.5 * d_alpha * s.opacity * c.gauss;
        let dx = px - s.pixel_center.x;
        let dy = py - s.pixel_center.y;
        let [a, b, cc] = s.conic;
        g.conic[0] += d_q * dx * dx;
        g.conic[1] += d_q * 2.0 * dx * dy;
        g.conic[2] += d_q * dy * dy;
        g.mean.x -= d_q * 2.0 * (a * dx + b * dy);
        g.mean.y -= d_q * 2.0 * (b * dx + cc * dy);
    }
}

/// Tiled render without saving backward state.
pub fn render(gaussians: &[Gaussian2D], cam: &Camera) -> RenderOutput {
    Rasterizer::default().forward(gaussians, cam)
}

/// Reference renderer: every pixel walks the full depth-sorted splat list.
pub fn render_brute_force(gaussians: &[Gaussian2D], cam: &Camera) -> RenderOutput {
    let splats = project_all(gaussians, cam);
    let all: Vec<u32> = (0..splats.len() as u32).collect();
    let mut out = RenderOutput::empty(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let v = blend_pixel(x as f64, y as f64, &splats, &all, |_| {});
            write_pixel(&mut out, x, y, &v);
        }
    }
    out
}

/// Renders only pixels `xs x ys`, returning the window image and an
/// active-set digest of the window (including which splats survive
/// projection). Pixel values equal the full render bitwise.
pub fn render_window(
    gaussians: &[Gaussian2D],
    cam: &Camera,
    xs: std::ops::Range<usize>,
    ys: std::ops::Range<usize>,
) -> (RenderOutput, u64) {
    let splats = project_all(gaussians, cam);
    let mut digest = fnv_mix(FNV_OFFSET, splats.len() as u64);
    for s in &splats {
        digest = fnv_mix(digest, s.source_index as u64);
    }
    let mut out = RenderOutput::empty(xs.len(), ys.len());
    if xs.is_empty() || ys.is_empty() {
        return (out, digest);
    }
    let (x0, x1) = (xs.start as f64, (xs.end - 1) as f64);
    let (y0, y1) = (ys.start as f64, (ys.end - 1) as f64);
    let list: Vec<u32> = (0..splats.len() as u32)
        .filter(|&k| splats[k as usize].overlaps_box(x0, x1, y0, y1))
        .collect();
    for (wy, y) in ys.clone().enumerate() {
        for (wx, x) in xs.clone().enumerate() {
            let v = blend_pixel(x as f64, y as f64, &splats, &list, |c| {
                digest = fnv_mix(digest, splats[list[c.slot] as usize].source_index as u64);
            });
            digest = fnv_mix(digest, u64::MAX - (v.alpha() >= MIN_DEPTH_ALPHA) as u64);
            write_pixel(&mut out, wx, wy, &v);
        }
    }
    (out, digest)
}
