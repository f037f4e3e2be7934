use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera with a rigid world-to-camera pose. Camera space looks down
/// +z with x to the right and y down; pixel `(i, j)` samples the image plane
/// at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        (fx, fy): (f64, f64),
        (cx, cy): (f64, f64),
        world_to_camera: Matrix4<f64>,
        (width, height): (usize, usize),
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidCamera(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return bad("require 0 < near < far");
        }
        let r = self.rotation();
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-6 {
            return bad("pose rotation block is not orthonormal");
        }
        let last = self.world_to_camera.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return bad("pose is not a rigid homogeneous transform");
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Projects a camera-space point to pixel coordinates.
    pub fn project(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// World-space direction of the ray through pixel coordinates `(px, py)`,
    /// scaled so that it advances camera depth by exactly one unit.
    pub fn ray_direction(&self, px: f64, py: f64) -> Vector3<f64> {
        let d = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        self.rotation().transpose() * d
    }

    /// World point seen at pixel coordinates `(px, py)` with camera depth `z`.
    pub fn unproject(&self, px: f64, py: f64, z: f64) -> Vector3<f64> {
        self.center() + self.ray_direction(px, py) * z
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world
    /// direction that maps to image -y.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Matrix4<f64> {
        let z = (target - eye).normalize();
        let x = (-up).cross(&z).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }
}

/// JSON layout used in `cameras.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 world-to-camera transform.
    pub w2c: [f64; 16],
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let mut w2c = [0.0; 16];
        for r in 0..4 {
            for k in 0..4 {
                w2c[r * 4 + k] = c.world_to_camera[(r, k)];
            }
        }
        Self {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            w2c,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

impl TryFrom<&CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: &CameraRecord) -> Result<Self> {
        Camera::new(
            (r.fx, r.fy),
            (r.cx, r.cy),
            Matrix4::from_row_slice(&r.w2c),
            (r.width, r.height),
            r.near,
            r.far,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_intrinsics() {
        let id = Matrix4::identity();
        assert!(Camera::new((0.0, 1.0), (0.0, 0.0), id, (4, 4), 0.1, 10.0).is_err());
        assert!(Camera::new((1.0, 1.0), (0.0, 0.0), id, (4, 4), 5.0, 1.0).is_err());
        let mut skew = id;
        skew[(0, 1)] = 0.5;
        assert!(Camera::new((1.0, 1.0), (0.0, 0.0), skew, (4, 4), 0.1, 10.0).is_err());
    }

    #[test]
    fn look_at_round_trip() {
        let w2c = Camera::look_at(
            Vector3::new(0.0, -10.0, 0.0),
            Vector3::new(0.0, 0.0, 50.0),
            Vector3::new(0.0, -1.0, 0.0),
        );
        let cam = Camera::new((100.0, 100.0), (64.0, 64.0), w2c, (128, 128), 1.0, 200.0).unwrap();
        assert!((cam.center() - Vector3::new(0.0, -10.0, 0.0)).norm() < 1e-12);
        let p = cam.unproject(10.0, 90.0, 42.0);
        let pc = cam.to_camera(&p);
        assert!((pc.z - 42.0).abs() < 1e-10);
        let px = cam.project(&pc);
        assert!((px - Vector2::new(10.0, 90.0)).norm() < 1e-10);
        let rec = CameraRecord::from(&cam);
        assert_eq!(Camera::try_from(&rec).unwrap(), cam);
    }

    #[test]
    fn look_at_keeps_image_axes() {
        let w2c = Camera::look_at(Vector3::zeros(), Vector3::new(0.0, 0.0, 10.0), Vector3::new(0.0, -1.0, 0.0));
        assert!((w2c - Matrix4::identity()).amax() < 1e-15);
    }
}
