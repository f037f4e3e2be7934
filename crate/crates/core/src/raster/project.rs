use nalgebra::{Matrix2, Matrix2x3, Matrix3x2, Vector2, Vector3};

use crate::camera::Camera;
use crate::primitive::{Gaussian2D, GaussianGrad};

/// Added to the screen covariance diagonal before evaluation.
pub const DILATION: f64 = 0.3;
/// Splats are cut off beyond this Mahalanobis radius.
pub const SIGMA_CUTOFF: f64 = 3.0;
pub(crate) const CUTOFF_SQ: f64 = SIGMA_CUTOFF * SIGMA_CUTOFF;
// Slack for the conservative tile-overlap test.
const OVERLAP_SLACK: f64 = 1e-6;

/// A splat projected to screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedSplat {
    pub pixel_center: Vector2<f64>,
    /// Screen covariance before dilation (pixel^2).
    pub cov2d: Matrix2<f64>,
    /// Inverse of the dilated covariance, as `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub camera_z: f64,
    pub source_index: usize,
    pub opacity: f64,
    pub color: Vector3<f64>,
    /// Half extents of the axis-aligned box around the cutoff ellipse.
    pub half_extent: Vector2<f64>,
}

impl ProjectedSplat {
    /// Squared Mahalanobis distance of pixel coordinates `(px, py)`.
    #[inline]
    pub fn mahalanobis_sq(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.pixel_center.x;
        let dy = py - self.pixel_center.y;
        let [a, b, c] = self.conic;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }

    /// Minimum squared Mahalanobis distance over the box
    /// `[x0, x1] x [y0, y1]` (pixel coordinates).
    pub fn min_mahalanobis_sq_in_box(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
        let (mx, my) = (self.pixel_center.x, self.pixel_center.y);
        if mx >= x0 && mx <= x1 && my >= y0 && my <= y1 {
            return 0.0;
        }
        let [a, b, c] = self.conic;
        let q = |dx: f64, dy: f64| a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        let mut best = f64::INFINITY;
        for x in [x0, x1] {
            let dx = x - mx;
            let dy = (-b * dx / c).clamp(y0 - my, y1 - my);
            best = best.min(q(dx, dy));
        }
        for y in [y0, y1] {
            let dy = y - my;
            let dx = (-b * dy / a).clamp(x0 - mx, x1 - mx);
            best = best.min(q(dx, dy));
        }
        best
    }

    /// Whether the cutoff ellipse reaches any point of the box.
    pub fn overlaps_box(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> bool {
        self.min_mahalanobis_sq_in_box(x0, x1, y0, y1) <= CUTOFF_SQ + OVERLAP_SLACK
    }
}

struct Geometry {
    pc: Vector3<f64>,
    jac: Matrix2x3<f64>,
    rm: Matrix3x2<f64>,
    a: Matrix2<f64>,
    conic: Matrix2<f64>,
}

fn geometry(g: &Gaussian2D, cam: &Camera) -> Option<Geometry> {
    let pc = cam.to_camera(&g.center);
    let z = pc.z;
    if !(z >= cam.near && z <= cam.far) {
        return None;
    }
    #[rustfmt::skip]
    let jac = Matrix2x3::new(
        cam.fx / z, 0.0, -cam.fx * pc.x / (z * z),
        0.0, cam.fy / z, -cam.fy * pc.y / (z * z),
    );
    let m = Matrix3x2::from_columns(&[g.tangent_u * g.scale_u, g.tangent_v * g.scale_v]);
    let rm = cam.rotation() * m;
    let a = jac * rm;
    let dil = a * a.transpose() + Matrix2::identity() * DILATION;
    let conic = dil.try_inverse()?;
    Some(Geometry {
        pc,
        jac,
        rm,
        a,
        conic,
    })
}

/// Projects one splat; `None` when it is clipped by the depth range or its
/// cutoff ellipse misses the image.
pub fn project_splat(g: &Gaussian2D, cam: &Camera, source_index: usize) -> Option<ProjectedSplat> {
    let geo = geometry(g, cam)?;
    let cov2d = geo.a * geo.a.transpose();
    let dil_xx = cov2d[(0, 0)] + DILATION;
    let dil_yy = cov2d[(1, 1)] + DILATION;
    let splat = ProjectedSplat {
        pixel_center: cam.project(&geo.pc),
        cov2d,
        conic: [geo.conic[(0, 0)], geo.conic[(0, 1)], geo.conic[(1, 1)]],
        camera_z: geo.pc.z,
        source_index,
        opacity: g.opacity,
        color: g.color,
        half_extent: Vector2::new(SIGMA_CUTOFF * dil_xx.sqrt(), SIGMA_CUTOFF * dil_yy.sqrt()),
    };
    if !splat.pixel_center.iter().all(|v| v.is_finite()) {
        return None;
    }
    let (w, h) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    if splat.overlaps_box(0.0, w, 0.0, h) {
        Some(splat)
    } else {
        None
    }
}

/// Gradient with respect to one projected splat's screen-space quantities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ScreenGrad {
    pub mean: Vector2<f64>,
    /// Gradient on `(a, b, c)` of the conic, `b` counted once.
    pub conic: [f64; 3],
    pub camera_z: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl ScreenGrad {
    pub fn add(&mut self, o: &ScreenGrad) {
        self.mean += o.mean;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.camera_z += o.camera_z;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Pulls screen-space gradients back to the splat's world attributes.
pub fn project_splat_backward(g: &Gaussian2D, cam: &Camera, sg: &ScreenGrad) -> GaussianGrad {
    let Some(geo) = geometry(g, cam) else {
        return GaussianGrad::default();
    };
    let (fx, fy) = (cam.fx, cam.fy);
    let Geometry {
        pc,
        jac,
        rm,
        a,
        conic,
    } = geo;
    let (x, y, z) = (pc.x, pc.y, pc.z);

    let [ga, gb, gc] = sg.conic;
    let g_conic = Matrix2::new(ga, 0.5 * gb, 0.5 * gb, gc);
    let g_cov = -(conic * g_conic * conic);
    let g_a = (g_cov + g_cov.transpose()) * a;
    let g_jac = g_a * rm.transpose();
    let g_rm = jac.transpose() * g_a;
    let g_m = cam.rotation().transpose() * g_rm;

    let gm_u = g_m.column(0).into_owned();
    let gm_v = g_m.column(1).into_owned();

    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_pc = Vector3::new(
        sg.mean.x * fx / z,
        sg.mean.y * fy / z,
        -sg.mean.x * fx * x / z2 - sg.mean.y * fy * y / z2 + sg.camera_z,
    );
    g_pc.x += g_jac[(0, 2)] * (-fx / z2);
    g_pc.y += g_jac[(1, 2)] * (-fy / z2);
    g_pc.z += g_jac[(0, 0)] * (-fx / z2)
        + g_jac[(0, 2)] * (2.0 * fx * x / z3)
        + g_jac[(1, 1)] * (-fy / z2)
        + g_jac[(1, 2)] * (2.0 * fy * y / z3);

    GaussianGrad {
        center: cam.rotation().transpose() * g_pc,
        tangent_u: gm_u * g.scale_u,
        tangent_v: gm_v * g.scale_v,
        scale_u: g.tangent_u.dot(&gm_u),
        scale_v: g.tangent_v.dot(&gm_v),
        opacity: sg.opacity,
        color: sg.color,
    }
}
