use nalgebra::Vector3;

use crate::deform::{deform_scene, DeformField};
use crate::error::{Error, Result};
use crate::primitive::{Gaussian2D, SplatParams};

/// Axis-aligned world box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        b
    }

    pub fn extent(&self) -> f64 {
        if self.min.x > self.max.x {
            0.0
        } else {
            (self.max - self.min).norm()
        }
    }
}

/// The optimizable scene: raw per-splat parameters plus optional deformation
/// banks (one set per splat).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub params: Vec<SplatParams>,
    pub deform: Option<DeformField>,
    pub bounds: Aabb,
}

impl Scene {
    pub fn new(params: Vec<SplatParams>, deform: Option<DeformField>) -> Result<Self> {
        let bounds = Aabb::from_points(params.iter().map(|p| &p.position));
        let s = Self {
            params,
            deform,
            bounds,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.deform {
            if d.splat_count() != self.params.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} deform bank sets for {} gaussians",
                    d.splat_count(),
                    self.params.len()
                )));
            }
        }
        Ok(())
    }

    pub fn refresh_bounds(&mut self) {
        self.bounds = Aabb::from_points(self.params.iter().map(|p| &p.position));
    }

    /// The undeformed primitives.
    pub fn canonical(&self) -> Result<Vec<Gaussian2D>> {
        self.params.iter().map(|p| p.to_gaussian()).collect()
    }

    /// Primitives deformed to normalized time `t`.
    pub fn at_time(&self, t: f64) -> Result<Vec<Gaussian2D>> {
        let canonical = self.canonical()?;
        match &self.deform {
            Some(field) => deform_scene(&canonical, field, t),
            None => Ok(canonical),
        }
    }
}
