//! Planar Gaussian primitives and the tangent-frame math shared by the
//! rasterizer and the deformation model.

use nalgebra::{Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const FRAME_EPS: f64 = 1e-9;

/// A planar Gaussian embedded in 3D: a center, an orthonormal tangent frame,
/// two scales along the tangents, an opacity and a flat RGB color.
///
/// The fields are public so that the rasterizer and gradient checks can work
/// with perturbed (not necessarily valid) copies; [`Gaussian2D::new`] and
/// [`Gaussian2D::validate`] enforce the invariants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D {
    pub center: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub scale_u: f64,
    pub scale_v: f64,
    pub opacity: f64,
    pub color: Vec3,
}

impl Gaussian2D {
    pub fn new(
        center: Vec3,
        tangent_u: Vec3,
        tangent_v: Vec3,
        scales: (f64, f64),
        opacity: f64,
        color: Vec3,
    ) -> Result<Self> {
        let g = Self {
            center,
            tangent_u,
            tangent_v,
            scale_u: scales.0,
            scale_v: scales.1,
            opacity,
            color,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPrimitive(msg));
        if (self.tangent_u.norm() - 1.0).abs() > 1e-6 || (self.tangent_v.norm() - 1.0).abs() > 1e-6
        {
            return bad("tangent vectors must be unit length".into());
        }
        if self.tangent_u.dot(&self.tangent_v).abs() > 1e-6 {
            return bad("tangent vectors must be orthogonal".into());
        }
        if !(self.scale_u > 0.0 && self.scale_v > 0.0) {
            return bad(format!(
                "scales must be positive, got ({}, {})",
                self.scale_u, self.scale_v
            ));
        }
        if !(self.opacity > 0.0 && self.opacity < 1.0) {
            return bad(format!("opacity {} outside (0,1)", self.opacity));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad(format!("color {:?} outside [0,1]", self.color.as_slice()));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return bad("non-finite center".into());
        }
        Ok(())
    }

    pub fn normal(&self) -> Vec3 {
        self.tangent_u.cross(&self.tangent_v)
    }

    /// World point at tangent-plane coordinates `(u, v)`.
    pub fn point_at(&self, u: f64, v: f64) -> Vec3 {
        self.center + self.tangent_u * (self.scale_u * u) + self.tangent_v * (self.scale_v * v)
    }
}

/// Homogeneous transform mapping `(u, v, 1, 1)` to the world point on the
/// splat plane: columns `[s_u t_u, s_v t_v, 0, p_c]` over `[0 0 0 1]`.
pub fn build_h(g: &Gaussian2D) -> Result<Matrix4<f64>> {
    if g.tangent_u.cross(&g.tangent_v).norm() < FRAME_EPS {
        return Err(Error::InvalidPrimitive("degenerate tangent frame".into()));
    }
    let su = g.tangent_u * g.scale_u;
    let sv = g.tangent_v * g.scale_v;
    let p = g.center;
    #[rustfmt::skip]
    let h = Matrix4::new(
        su.x, sv.x, 0.0, p.x,
        su.y, sv.y, 0.0, p.y,
        su.z, sv.z, 0.0, p.z,
        0.0,  0.0,  0.0, 1.0,
    );
    Ok(h)
}

/// Applies `H` to the homogeneous tangent-plane point `(u, v, 1, 1)`.
pub fn apply_h(h: &Matrix4<f64>, u: f64, v: f64) -> Vec3 {
    let p = h * Vector4::new(u, v, 1.0, 1.0);
    Vec3::new(p.x, p.y, p.z)
}

/// Standard Gaussian in tangent-plane coordinates.
pub fn eval_gaussian_uv(u: f64, v: f64) -> f64 {
    (-(u * u + v * v) / 2.0).exp()
}

/// Gram-Schmidt: `t_u = u/|u|`, `t_v = normalize(v - (v.t_u) t_u)`.
pub fn orthonormalize_frame(u_raw: &Vec3, v_raw: &Vec3) -> Result<(Vec3, Vec3)> {
    let nu = u_raw.norm();
    if !(nu > FRAME_EPS) {
        return Err(Error::DegenerateFrame);
    }
    let tu = u_raw / nu;
    let w = v_raw - tu * v_raw.dot(&tu);
    let nw = w.norm();
    if !(nw > FRAME_EPS) {
        return Err(Error::DegenerateFrame);
    }
    Ok((tu, w / nw))
}

/// Vector-Jacobian product of [`orthonormalize_frame`].
pub fn orthonormalize_frame_backward(
    u_raw: &Vec3,
    v_raw: &Vec3,
    grad_tu: &Vec3,
    grad_tv: &Vec3,
) -> (Vec3, Vec3) {
    let nu = u_raw.norm();
    let tu = u_raw / nu;
    let proj = v_raw.dot(&tu);
    let w = v_raw - tu * proj;
    let nw = w.norm();
    let tv = w / nw;

    let grad_w = (grad_tv - tv * tv.dot(grad_tv)) / nw;
    let grad_v = grad_w - tu * tu.dot(&grad_w);
    let grad_tu_total = grad_tu - v_raw * grad_w.dot(&tu) - grad_w * proj;
    let grad_u = (grad_tu_total - tu * tu.dot(&grad_tu_total)) / nu;
    (grad_u, grad_v)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained, optimizer-facing parameters of one splat.
///
/// Opacity is stored as a logit and scales as logs; the frame vectors are
/// raw and re-orthonormalized whenever a [`Gaussian2D`] is produced. The same
/// struct doubles as the gradient container for these parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatParams {
    pub position: Vec3,
    pub frame_u: Vec3,
    pub frame_v: Vec3,
    pub log_scale: [f64; 2],
    pub opacity_logit: f64,
    pub color: Vec3,
}

impl SplatParams {
    pub const LEN: usize = 15;

    pub fn from_gaussian(g: &Gaussian2D) -> Self {
        Self {
            position: g.center,
            frame_u: g.tangent_u,
            frame_v: g.tangent_v,
            log_scale: [g.scale_u.ln(), g.scale_v.ln()],
            opacity_logit: logit(g.opacity),
            color: g.color,
        }
    }

    pub fn to_gaussian(&self) -> Result<Gaussian2D> {
        let (tu, tv) = orthonormalize_frame(&self.frame_u, &self.frame_v)?;
        Ok(Gaussian2D {
            center: self.position,
            tangent_u: tu,
            tangent_v: tv,
            scale_u: self.log_scale[0].exp(),
            scale_v: self.log_scale[1].exp(),
            opacity: sigmoid(self.opacity_logit),
            color: self.color,
        })
    }

    /// Pulls a gradient on the exposed [`Gaussian2D`] back to these raw
    /// parameters. `g` must be `self.to_gaussian()`.
    pub fn backward(&self, g: &Gaussian2D, grad: &GaussianGrad) -> SplatParams {
        let (gu, gv) = orthonormalize_frame_backward(
            &self.frame_u,
            &self.frame_v,
            &grad.tangent_u,
            &grad.tangent_v,
        );
        SplatParams {
            position: grad.center,
            frame_u: gu,
            frame_v: gv,
            log_scale: [grad.scale_u * g.scale_u, grad.scale_v * g.scale_v],
            opacity_logit: grad.opacity * g.opacity * (1.0 - g.opacity),
            color: grad.color,
        }
    }

    pub fn to_array(&self) -> [f64; Self::LEN] {
        let p = &self.position;
        let u = &self.frame_u;
        let v = &self.frame_v;
        let c = &self.color;
        [
            p.x,
            p.y,
            p.z,
            u.x,
            u.y,
            u.z,
            v.x,
            v.y,
            v.z,
            self.log_scale[0],
            self.log_scale[1],
            self.opacity_logit,
            c.x,
            c.y,
            c.z,
        ]
    }

    pub fn from_array(a: &[f64; Self::LEN]) -> Self {
        Self {
            position: Vec3::new(a[0], a[1], a[2]),
            frame_u: Vec3::new(a[3], a[4], a[5]),
            frame_v: Vec3::new(a[6], a[7], a[8]),
            log_scale: [a[9], a[10]],
            opacity_logit: a[11],
            color: Vec3::new(a[12], a[13], a[14]),
        }
    }

    /// Replaces the raw frame by its orthonormalized version and clamps the
    /// color into `[0,1]`. The produced [`Gaussian2D`] is unchanged up to
    /// rounding except where the color was out of range.
    pub fn project(&mut self) {
        if let Ok((tu, tv)) = orthonormalize_frame(&self.frame_u, &self.frame_v) {
            self.frame_u = tu;
            self.frame_v = tv;
        }
        for c in self.color.iter_mut() {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

/// Gradient with respect to the exposed attributes of a [`Gaussian2D`].
/// Tangent gradients treat both tangent vectors as free 3-vectors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GaussianGrad {
    pub center: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub scale_u: f64,
    pub scale_v: f64,
    pub opacity: f64,
    pub color: Vec3,
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        *self == GaussianGrad::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn axis_gaussian() -> Gaussian2D {
        Gaussian2D::new(
            Vec3::zeros(),
            Vec3::x(),
            Vec3::y(),
            (1.0, 1.0),
            0.5,
            Vec3::new(0.2, 0.3, 0.4),
        )
        .unwrap()
    }

    #[test]
    fn build_h_identity_frame() {
        let h = build_h(&axis_gaussian()).unwrap();
        assert_eq!(apply_h(&h, 0.0, 0.0), Vec3::zeros());
        assert_eq!(apply_h(&h, 2.0, 3.0), Vec3::new(2.0, 3.0, 0.0));
    }

    #[test]
    fn build_h_scaled_offset_frame() {
        let g = Gaussian2D {
            center: Vec3::new(1.0, 1.0, 1.0),
            tangent_u: Vec3::z(),
            tangent_v: Vec3::x(),
            scale_u: 0.5,
            ..axis_gaussian()
        };
        let h = build_h(&g).unwrap();
        assert_eq!(apply_h(&h, 2.0, 0.0), Vec3::new(1.0, 1.0, 2.0));
    }

    #[test]
    fn build_h_rejects_degenerate() {
        let g = Gaussian2D {
            tangent_v: Vec3::x(),
            ..axis_gaussian()
        };
        assert!(matches!(build_h(&g), Err(Error::InvalidPrimitive(_))));
    }

    #[test]
    fn standard_gaussian_values() {
        assert_eq!(eval_gaussian_uv(0.0, 0.0), 1.0);
        assert!((eval_gaussian_uv(1.0, 0.0) - 0.60653).abs() < 1e-5);
        assert!((eval_gaussian_uv(1.0, 1.0) - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn gram_schmidt_examples() {
        let (u, v) =
            orthonormalize_frame(&Vec3::new(2.0, 0.0, 0.0), &Vec3::new(0.0, 3.0, 0.0)).unwrap();
        assert_eq!((u, v), (Vec3::x(), Vec3::y()));
        let (u, v) =
            orthonormalize_frame(&Vec3::new(1.0, 0.0, 0.0), &Vec3::new(1.0, 1.0, 0.0)).unwrap();
        assert_eq!((u, v), (Vec3::x(), Vec3::y()));
        let (u, v) =
            orthonormalize_frame(&Vec3::new(1.0, 1.0, 0.0), &Vec3::new(0.0, 1.0, 0.0)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((u - Vec3::new(s, s, 0.0)).norm() < 1e-15);
        assert!((v - Vec3::new(-s, s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn gram_schmidt_rejects_parallel() {
        let r = orthonormalize_frame(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(2.0, 4.0, 6.0));
        assert!(matches!(r, Err(Error::DegenerateFrame)));
        let r = orthonormalize_frame(&Vec3::zeros(), &Vec3::y());
        assert!(matches!(r, Err(Error::DegenerateFrame)));
    }

    #[test]
    fn invalid_primitives_rejected() {
        let base = axis_gaussian();
        assert!(Gaussian2D { opacity: 1.0, ..base }.validate().is_err());
        assert!(Gaussian2D { scale_u: 0.0, ..base }.validate().is_err());
        assert!(Gaussian2D {
            color: Vec3::new(1.2, 0.0, 0.0),
            ..base
        }
        .validate()
        .is_err());
        assert!(Gaussian2D {
            tangent_u: Vec3::new(0.0, 0.0, 2.0),
            ..base
        }
        .validate()
        .is_err());
    }

    #[test]
    fn orthonormalize_backward_matches_finite_differences() {
        let u = Vec3::new(0.7, -0.2, 1.1);
        let v = Vec3::new(0.3, 0.9, -0.4);
        let wu = Vec3::new(0.5, -1.0, 0.25);
        let wv = Vec3::new(-0.3, 0.2, 0.8);
        let loss = |u: &Vec3, v: &Vec3| {
            let (a, b) = orthonormalize_frame(u, v).unwrap();
            a.dot(&wu) + b.dot(&wv)
        };
        let (gu, gv) = orthonormalize_frame_backward(&u, &v, &wu, &wv);
        let h = 1e-6;
        for k in 0..3 {
            let mut up = u;
            let mut um = u;
            up[k] += h;
            um[k] -= h;
            let fd = (loss(&up, &v) - loss(&um, &v)) / (2.0 * h);
            assert!((fd - gu[k]).abs() < 1e-8, "u[{k}]: {fd} vs {}", gu[k]);
            let mut vp = v;
            let mut vm = v;
            vp[k] += h;
            vm[k] -= h;
            let fd = (loss(&u, &vp) - loss(&u, &vm)) / (2.0 * h);
            assert!((fd - gv[k]).abs() < 1e-8, "v[{k}]: {fd} vs {}", gv[k]);
        }
    }

    #[test]
    fn params_round_trip_through_array() {
        let p = SplatParams::from_gaussian(&axis_gaussian());
        assert_eq!(SplatParams::from_array(&p.to_array()), p);
    }

    fn unit_vec() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(x, y, z)| x * x + y * y + z * z > 0.01)
            .prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn homogeneous_form_matches_explicit_form(
            c in (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0),
            u_raw in unit_vec(),
            v_raw in unit_vec(),
            su in 0.01f64..5.0,
            sv in 0.01f64..5.0,
            u in -3.0f64..3.0,
            v in -3.0f64..3.0,
        ) {
            let Ok((tu, tv)) = orthonormalize_frame(&u_raw, &v_raw) else {
                return Ok(());
            };
            let g = Gaussian2D {
                center: Vec3::new(c.0, c.1, c.2),
                tangent_u: tu,
                tangent_v: tv,
                scale_u: su,
                scale_v: sv,
                opacity: 0.5,
                color: Vec3::zeros(),
            };
            let h = build_h(&g).unwrap();
            let err = (apply_h(&h, u, v) - g.point_at(u, v)).amax();
            prop_assert!(err < 1e-12, "err {err}");
        }

        #[test]
        fn orthonormalize_is_idempotent(u_raw in unit_vec(), v_raw in unit_vec()) {
            let Ok((tu, tv)) = orthonormalize_frame(&u_raw, &v_raw) else {
                return Ok(());
            };
            let (tu2, tv2) = orthonormalize_frame(&tu, &tv).unwrap();
            prop_assert!((tu2 - tu).amax() < 1e-12);
            prop_assert!((tv2 - tv).amax() < 1e-12);
            prop_assert!(tu.dot(&tv).abs() < 1e-12);
        }
    }
}
